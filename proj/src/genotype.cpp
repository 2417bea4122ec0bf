#include "stnas/genotype.hpp"

#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "stnas/hash.hpp"

namespace stnas {

using ojson = nlohmann::ordered_json;

namespace {

[[noreturn]] void fail(const std::string& field, const std::string& what) { throw GenotypeError(field + ": " + what); }

void reject_unknown_keys(const ojson& obj, const std::set<std::string>& allowed, const std::string& field) {
  if (!obj.is_object()) fail(field, "expected an object");
  for (const auto& [key, _] : obj.items()) {
    if (!allowed.count(key)) fail(field + "." + key, "unknown key");
  }
  for (const auto& key : allowed) {
    if (!obj.contains(key)) fail(field + "." + key, "missing key");
  }
}

std::int64_t get_int(const ojson& v, const std::string& field) {
  if (!v.is_number_integer()) fail(field, "expected an integer");
  return v.get<std::int64_t>();
}

}  // namespace

void Genotype::validate(bool allow_reference_ops) const {
  if (meta.micro_nodes < 2) fail("meta.M", "must be >= 2");
  if (meta.blocks < 1) fail("meta.B", "must be >= 1");
  if (meta.hidden < 1) fail("meta.D", "must be >= 1");
  if (meta.opset != kOpsetVersion) fail("meta.opset", "unsupported operator set '" + meta.opset + "'");
  if (static_cast<std::int64_t>(blocks.size()) != meta.blocks) {
    fail("blocks", "expected " + std::to_string(meta.blocks) + " blocks, found " + std::to_string(blocks.size()));
  }
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string bf = "blocks[" + std::to_string(b) + "].nodes";
    if (blocks[b].micro_nodes() != meta.micro_nodes) {
      fail(bf, "expected " + std::to_string(meta.micro_nodes - 1) + " nodes, found " +
                   std::to_string(blocks[b].nodes.size()));
    }
    for (std::size_t k = 0; k < blocks[b].nodes.size(); ++k) {
      const auto j = static_cast<std::int64_t>(k + 1);
      const auto& edges = blocks[b].nodes[k];
      const std::string nf = bf + "[" + std::to_string(k) + "]";
      const auto want = static_cast<std::size_t>(std::min<std::int64_t>(j, 2));
      if (edges.size() != want) fail(nf, "node " + std::to_string(j) + " needs exactly " + std::to_string(want) + " edges");
      if (edges[0].src != j - 1) fail(nf + "[0].src", "first edge must come from node " + std::to_string(j - 1));
      for (std::size_t e = 0; e < edges.size(); ++e) {
        if (edges[e].src < 0 || edges[e].src >= j) fail(nf + "[" + std::to_string(e) + "].src", "source must be < node index");
        if (!allow_reference_ops && !searchable_index(edges[e].op)) fail(nf + "[" + std::to_string(e) + "].op", "operator not in the searchable set");
      }
      if (edges.size() == 2 && edges[1].src == edges[0].src) fail(nf + "[1].src", "duplicate source");
    }
  }
  if (static_cast<std::int64_t>(backbone.size()) != meta.blocks) fail("backbone", "need exactly one edge per block");
  std::vector<bool> seen(static_cast<std::size_t>(meta.blocks + 1), false);
  for (std::size_t e = 0; e < backbone.size(); ++e) {
    const auto& edge = backbone[e];
    const std::string ef = "backbone[" + std::to_string(e) + "]";
    if (edge.dst < 1 || edge.dst > meta.blocks) fail(ef + ".dst", "block index out of range");
    if (seen[static_cast<std::size_t>(edge.dst)]) fail(ef + ".dst", "block has more than one incoming edge");
    seen[static_cast<std::size_t>(edge.dst)] = true;
    if (edge.src < kEmbed || edge.src >= edge.dst) fail(ef + ".src", "source must be EMBED or an earlier block");
    if (edge.dst == 1 && edge.src != kEmbed) fail(ef + ".src", "block 1 must be fed by EMBED");
  }
}

std::string genotype_to_json(const Genotype& g) {
  ojson doc;
  ojson meta;
  meta["M"] = g.meta.micro_nodes;
  meta["B"] = g.meta.blocks;
  meta["D"] = g.meta.hidden;
  meta["opset"] = g.meta.opset;
  meta["dataset"] = g.meta.dataset;
  doc["meta"] = meta;
  ojson blocks = ojson::array();
  for (const auto& b : g.blocks) {
    ojson nodes = ojson::array();
    for (const auto& edges : b.nodes) {
      ojson arr = ojson::array();
      for (const auto& e : edges) {
        ojson je;
        je["src"] = e.src;
        je["op"] = std::string(to_string(e.op));
        arr.push_back(je);
      }
      nodes.push_back(arr);
    }
    ojson jb;
    jb["nodes"] = nodes;
    blocks.push_back(jb);
  }
  doc["blocks"] = blocks;
  ojson backbone = ojson::array();
  for (const auto& e : g.backbone) {
    ojson je;
    if (e.src == kEmbed) {
      je["src"] = "EMBED";
    } else {
      je["src"] = e.src;
    }
    je["dst"] = e.dst;
    backbone.push_back(je);
  }
  doc["backbone"] = backbone;
  return doc.dump(2);
}

Genotype genotype_from_json(const std::string& text) {
  ojson doc;
  try {
    doc = ojson::parse(text);
  } catch (const ojson::parse_error& e) {
    throw GenotypeError(std::string("genotype: invalid JSON: ") + e.what());
  }
  reject_unknown_keys(doc, {"meta", "blocks", "backbone"}, "genotype");
  Genotype g;
  const ojson& meta = doc["meta"];
  reject_unknown_keys(meta, {"M", "B", "D", "opset", "dataset"}, "meta");
  g.meta.micro_nodes = get_int(meta["M"], "meta.M");
  g.meta.blocks = get_int(meta["B"], "meta.B");
  g.meta.hidden = get_int(meta["D"], "meta.D");
  if (!meta["opset"].is_string()) fail("meta.opset", "expected a string");
  if (!meta["dataset"].is_string()) fail("meta.dataset", "expected a string");
  g.meta.opset = meta["opset"].get<std::string>();
  g.meta.dataset = meta["dataset"].get<std::string>();

  if (!doc["blocks"].is_array()) fail("blocks", "expected an array");
  for (std::size_t b = 0; b < doc["blocks"].size(); ++b) {
    const std::string bf = "blocks[" + std::to_string(b) + "]";
    const ojson& jb = doc["blocks"][b];
    reject_unknown_keys(jb, {"nodes"}, bf);
    if (!jb["nodes"].is_array()) fail(bf + ".nodes", "expected an array");
    BlockGenotype block;
    for (std::size_t k = 0; k < jb["nodes"].size(); ++k) {
      const std::string nf = bf + ".nodes[" + std::to_string(k) + "]";
      const ojson& jn = jb["nodes"][k];
      if (!jn.is_array()) fail(nf, "expected an array of edges");
      std::vector<GenotypeEdge> edges;
      for (std::size_t e = 0; e < jn.size(); ++e) {
        const std::string ef = nf + "[" + std::to_string(e) + "]";
        reject_unknown_keys(jn[e], {"src", "op"}, ef);
        GenotypeEdge edge;
        edge.src = get_int(jn[e]["src"], ef + ".src");
        if (!jn[e]["op"].is_string()) fail(ef + ".op", "expected a string");
        try {
          edge.op = operator_from_string(jn[e]["op"].get<std::string>());
        } catch (const std::invalid_argument& ex) {
          fail(ef + ".op", ex.what());
        }
        edges.push_back(edge);
      }
      block.nodes.push_back(std::move(edges));
    }
    g.blocks.push_back(std::move(block));
  }

  if (!doc["backbone"].is_array()) fail("backbone", "expected an array");
  for (std::size_t e = 0; e < doc["backbone"].size(); ++e) {
    const std::string ef = "backbone[" + std::to_string(e) + "]";
    const ojson& je = doc["backbone"][e];
    reject_unknown_keys(je, {"src", "dst"}, ef);
    BackboneEdge edge;
    if (je["src"].is_string()) {
      if (je["src"] != "EMBED") fail(ef + ".src", "expected \"EMBED\" or a block index");
      edge.src = kEmbed;
    } else {
      edge.src = get_int(je["src"], ef + ".src");
      if (edge.src < 1) fail(ef + ".src", "block indices start at 1");
    }
    edge.dst = get_int(je["dst"], ef + ".dst");
    g.backbone.push_back(edge);
  }
  g.validate();
  return g;
}

Genotype load_genotype(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw GenotypeError("cannot open genotype file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return genotype_from_json(ss.str());
}

void save_genotype(const Genotype& g, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << genotype_to_json(g) << '\n';
}

std::uint64_t genotype_hash(const Genotype& g) {
  Fnv1a h;
  h.update(genotype_to_json(g));
  return h.digest();
}

std::vector<BackboneEdge> chain_backbone(std::int64_t blocks) {
  std::vector<BackboneEdge> out;
  for (std::int64_t b = 1; b <= blocks; ++b) out.push_back({b == 1 ? kEmbed : b - 1, b});
  return out;
}

Genotype uniform_genotype(std::int64_t micro_nodes, std::int64_t blocks, std::int64_t hidden, OperatorKind op) {
  Genotype g;
  g.meta.micro_nodes = micro_nodes;
  g.meta.blocks = blocks;
  g.meta.hidden = hidden;
  BlockGenotype block;
  for (std::int64_t j = 1; j < micro_nodes; ++j) {
    std::vector<GenotypeEdge> edges{{j - 1, op}};
    if (j >= 2) edges.push_back({0, op});
    block.nodes.push_back(edges);
  }
  g.blocks.assign(static_cast<std::size_t>(blocks), block);
  g.backbone = chain_backbone(blocks);
  return g;
}

Genotype random_genotype(std::int64_t micro_nodes, std::int64_t blocks, std::int64_t hidden, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto& ops = searchable_operators();
  std::uniform_int_distribution<std::size_t> pick_op(0, ops.size() - 1);
  Genotype g;
  g.meta.micro_nodes = micro_nodes;
  g.meta.blocks = blocks;
  g.meta.hidden = hidden;
  for (std::int64_t b = 0; b < blocks; ++b) {
    BlockGenotype block;
    for (std::int64_t j = 1; j < micro_nodes; ++j) {
      std::vector<GenotypeEdge> edges{{j - 1, ops[pick_op(rng)]}};
      if (j >= 2) {
        std::uniform_int_distribution<std::int64_t> pick_src(0, j - 2);
        const std::int64_t src = pick_src(rng);
        edges.push_back({src, ops[pick_op(rng)]});
      }
      block.nodes.push_back(std::move(edges));
    }
    g.blocks.push_back(std::move(block));
  }
  for (std::int64_t b = 1; b <= blocks; ++b) {
    std::uniform_int_distribution<std::int64_t> pick_src(0, b - 1);
    g.backbone.push_back({b == 1 ? kEmbed : pick_src(rng), b});
  }
  return g;
}

}  // namespace stnas
