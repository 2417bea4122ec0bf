#include "stnas/checkpoint.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace stnas {

namespace fs = std::filesystem;

const Tensor& Checkpoint::tensor(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
  return it->second;
}

void write_checkpoint(const fs::path& dir, const std::vector<std::pair<std::string, const Tensor*>>& tensors,
                      const nlohmann::json& meta, const std::string& genotype_json) {
  const fs::path tmp = dir.string() + ".tmp";
  const fs::path old = dir.string() + ".old";
  fs::remove_all(tmp);
  fs::create_directories(tmp);

  nlohmann::json index = nlohmann::json::array();
  {
    std::ofstream bin(tmp / "tensors.bin", std::ios::binary);
    if (!bin) throw std::runtime_error("checkpoint: cannot write " + (tmp / "tensors.bin").string());
    std::int64_t offset = 0;
    for (const auto& [name, t] : tensors) {
      index.push_back({{"name", name}, {"shape", t->shape()}, {"offset", offset}});
      bin.write(reinterpret_cast<const char*>(t->data()), static_cast<std::streamsize>(t->size() * sizeof(double)));
      offset += static_cast<std::int64_t>(t->size() * sizeof(double));
    }
    if (!bin) throw std::runtime_error("checkpoint: write failed");
  }
  nlohmann::json manifest;
  manifest["format"] = "stnas-checkpoint-1";
  manifest["dtype"] = "float64";
  manifest["tensors"] = index;
  manifest["meta"] = meta;
  {
    std::ofstream out(tmp / "manifest.json");
    out << manifest.dump(1) << '\n';
  }
  if (!genotype_json.empty()) {
    std::ofstream out(tmp / "genotype.json");
    out << genotype_json << '\n';
  }

  fs::remove_all(old);
  if (fs::exists(dir)) fs::rename(dir, old);
  fs::rename(tmp, dir);
  fs::remove_all(old);
}

Checkpoint read_checkpoint(const fs::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("checkpoint: no manifest in " + dir.string());
  const auto manifest = nlohmann::json::parse(mf);
  Checkpoint ck;
  ck.meta = manifest.at("meta");
  std::ifstream bin(dir / "tensors.bin", std::ios::binary);
  if (!bin) throw std::runtime_error("checkpoint: no tensors.bin in " + dir.string());
  for (const auto& e : manifest.at("tensors")) {
    const auto name = e.at("name").get<std::string>();
    Tensor t(e.at("shape").get<Shape>());
    bin.seekg(e.at("offset").get<std::int64_t>());
    bin.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!bin) throw std::runtime_error("checkpoint: truncated tensors.bin (" + name + ")");
    ck.order.push_back(name);
    ck.tensors.emplace(name, std::move(t));
  }
  if (std::ifstream g(dir / "genotype.json"); g) {
    std::stringstream ss;
    ss << g.rdbuf();
    ck.genotype_json = ss.str();
  }
  return ck;
}

}  // namespace stnas
