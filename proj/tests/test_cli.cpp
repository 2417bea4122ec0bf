#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "stnas/data.hpp"
#include "stnas/genotype.hpp"

using namespace stnas;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "stnas_test_cli";

struct Run {
  int code = -1;
  std::string output;
};

Run cli(const std::string& args) {
  const fs::path log = kRoot / "last_output.txt";
  const std::string cmd = std::string(STNAS_CLI_PATH) + " " + args + " >" + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream in(log);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, std::string(std::istreambuf_iterator<char>(in), {})};
}

std::string p(const std::string& rel) { return (kRoot / rel).string(); }

std::string read_file(const fs::path& path) {
  std::ifstream in(path);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::size_t count_lines(const fs::path& path) {
  std::ifstream in(path);
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line)) n += line.empty() ? 0 : 1;
  return n;
}

// Shared fixture built once: a small dataset and a one-epoch search.
void ensure_base() {
  static bool ready = false;
  if (ready) return;
  fs::remove_all(kRoot);
  fs::create_directories(kRoot);
  REQUIRE(cli("generate --nodes 4 --steps 256 --seed 3 --out " + p("data")).code == 0);
  REQUIRE(cli("search --data " + p("data") + " --out " + p("search") + " --M 3 --B 2 --D 8 --epochs 2 --batch-size 16")
              .code == 0);
  ready = true;
}

}  // namespace

TEST_CASE("usage errors exit with 2") {
  ensure_base();
  CHECK(cli("").code == 2);
  CHECK(cli("bogus").code == 2);
  CHECK(cli("generate --nodes 4").code == 2);  // --out missing
  CHECK(cli("search --data " + p("data") + " --out " + p("bad_epochs") + " --epochs 0").code == 2);
}

TEST_CASE("--force guards non-empty output directories") {
  ensure_base();
  auto again = cli("generate --nodes 4 --steps 256 --seed 3 --out " + p("data"));
  CHECK(again.code == 2);
  CHECK(again.output.find("--force") != std::string::npos);
  CHECK(cli("generate --nodes 4 --steps 256 --seed 3 --out " + p("data") + " --force").code == 0);
}

TEST_CASE("data and genotype errors exit with 3") {
  ensure_base();
  CHECK(cli("search --data " + p("missing") + " --out " + p("nowhere")).code == 3);
  {
    std::ofstream bad(kRoot / "bad_genotype.json");
    bad << R"({"meta": {"M": 3, "B": 1, "D": 8, "opset": "autocts-v1"}, "blocks": [], "backbone": []})";
  }
  CHECK(cli("train --data " + p("data") + " --genotype " + p("bad_genotype.json") + " --out " + p("bad_train")).code == 3);
  CHECK(cli("report --log " + p("nothing") + " --out " + p("noreport")).code == 3);
}

TEST_CASE("search writes a genotype with the requested shape") {
  ensure_base();
  const auto g = load_genotype(p("search/genotype.json"));
  CHECK(g.meta.micro_nodes == 3);
  CHECK(g.meta.blocks == 2);
  CHECK(g.meta.hidden == 8);
  CHECK(count_lines(kRoot / "search" / "search_log.jsonl") == 2);
  CHECK(fs::exists(kRoot / "search" / "manifest.json"));

  auto derived = cli("derive --data " + p("data") + " --run " + p("search") + " --out " + p("derive"));
  REQUIRE(derived.code == 0);
  CHECK(read_file(kRoot / "derive" / "genotype.json") == read_file(kRoot / "search" / "genotype.json"));
}

TEST_CASE("flags override the config file") {
  ensure_base();
  {
    std::ofstream cfg(kRoot / "search.cfg");
    cfg << "# small run\nepochs = 3\nM = 3\nB = 1\nD = 8\nbatch_size = 16\n";
  }
  REQUIRE(cli("search --data " + p("data") + " --config " + p("search.cfg") + " --out " + p("cfg_run") + " --epochs 1")
              .code == 0);
  CHECK(count_lines(kRoot / "cfg_run" / "search_log.jsonl") == 1);
  CHECK(load_genotype(p("cfg_run/genotype.json")).meta.blocks == 1);

  {
    std::ofstream cfg(kRoot / "unknown.cfg");
    cfg << "epochs = 1\nwarp_factor = 9\n";
  }
  auto bad = cli("search --data " + p("data") + " --config " + p("unknown.cfg") + " --out " + p("cfg_bad"));
  CHECK(bad.code == 2);
  CHECK(bad.output.find("warp_factor") != std::string::npos);
}

TEST_CASE("no-macro search stacks blocks on a chain") {
  ensure_base();
  REQUIRE(cli("search --data " + p("data") + " --out " + p("nomacro") + " --M 3 --B 3 --D 8 --epochs 1 --batch-size 16 --no-macro")
              .code == 0);
  const auto g = load_genotype(p("nomacro/genotype.json"));
  CHECK(g.backbone == chain_backbone(3));
  CHECK(g.blocks[0] == g.blocks[2]);
}

TEST_CASE("train, eval and the feature check") {
  ensure_base();
  auto trained = cli("train --data " + p("data") + " --genotype " + p("search/genotype.json") + " --out " + p("train") +
                     " --train-epochs 2");
  REQUIRE(trained.code == 0);
  CHECK(trained.output.find("average") != std::string::npos);
  auto evaluated = cli("eval --data " + p("data") + " --model " + p("train/model") + " --out " + p("eval"));
  REQUIRE(evaluated.code == 0);
  CHECK(read_file(kRoot / "eval" / "report.json") == read_file(kRoot / "train" / "report.json"));

  // same node count, two features
  CtsDataset two;
  two.name = "two_features";
  two.values = Tensor(Shape{4, 256, 2});
  for (std::size_t i = 0; i < two.values.size(); ++i) two.values[i] = static_cast<double>(i % 17);
  write_dataset(two, kRoot / "data2");
  auto mismatch = cli("eval --data " + p("data2") + " --model " + p("train/model") + " --out " + p("eval2"));
  CHECK(mismatch.code == 3);
  CHECK(mismatch.output.find("feature dimension mismatch") != std::string::npos);
}

TEST_CASE("divergent training exits with 4") {
  ensure_base();
  auto r = cli("train --data " + p("data") + " --genotype " + p("search/genotype.json") + " --out " + p("diverge") +
               " --train-epochs 2 --train-lr 1e300 --loss mse");
  CHECK(r.code == 4);
}

TEST_CASE("report renders charts and a summary") {
  ensure_base();
  auto r = cli("report --log " + p("search") + " --out " + p("report"));
  REQUIRE(r.code == 0);
  for (const char* f : {"loss.svg", "tau.svg", "sharpness.svg", "summary.txt"}) CHECK(fs::exists(kRoot / "report" / f));
  CHECK(read_file(kRoot / "report" / "tau.svg").find("<svg") == 0);

  fs::create_directories(kRoot / "empty_log");
  std::ofstream(kRoot / "empty_log" / "search_log.jsonl").close();
  auto empty = cli("report --log " + p("empty_log") + " --out " + p("report_empty"));
  CHECK(empty.code == 3);
  CHECK(empty.output.find("empty") != std::string::npos);
}

TEST_CASE("seasonal generator has no adjacency") {
  ensure_base();
  REQUIRE(cli("generate --nodes 3 --steps 128 --seed 1 --process seasonal --out " + p("seasonal")).code == 0);
  const auto meta = nlohmann::json::parse(read_file(kRoot / "seasonal" / "meta.json"));
  CHECK(meta.at("has_adjacency").get<bool>() == false);
  CHECK_FALSE(fs::exists(kRoot / "seasonal" / "adj.csv"));
  CHECK(cli("generate --nodes 3 --steps 128 --process fractal --out " + p("fractal")).code == 2);
}
