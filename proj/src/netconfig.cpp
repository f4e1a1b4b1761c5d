#include "gmc/netconfig.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace gmc {

using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace {

std::string join_lines(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "\n" : "") + v[i];
  return out;
}

// Collects every violation instead of stopping at the first one.
class Reader {
 public:
  std::vector<std::string> errors;

  bool object(const json& j, const std::string& path, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) {
      errors.push_back(path + ": expected an object");
      return false;
    }
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& [key, _] : j.items())
      if (!ok.count(key)) errors.push_back(path + "." + key + ": unknown field");
    return true;
  }

  template <typename I>
  std::optional<I> integer(const json& j, const char* key, const std::string& path, bool required) {
    const std::string where = path + "." + key;
    if (!j.contains(key)) {
      if (required) errors.push_back(where + ": missing required field");
      return std::nullopt;
    }
    const auto& v = j.at(key);
    if (!v.is_number_integer()) {
      errors.push_back(where + ": expected an integer");
      return std::nullopt;
    }
    if constexpr (std::is_unsigned_v<I>) {
      if (v.is_number_unsigned() || v.get<std::int64_t>() >= 0) return v.get<I>();
      errors.push_back(where + ": expected a non-negative integer");
      return std::nullopt;
    } else {
      return v.get<I>();
    }
  }

  std::optional<bool> boolean(const json& j, const char* key, const std::string& path, bool required) {
    const std::string where = path + "." + key;
    if (!j.contains(key)) {
      if (required) errors.push_back(where + ": missing required field");
      return std::nullopt;
    }
    if (!j.at(key).is_boolean()) {
      errors.push_back(where + ": expected true or false");
      return std::nullopt;
    }
    return j.at(key).get<bool>();
  }

  template <typename I>
  void into(I& dst, const json& j, const char* key, const std::string& path, bool required = true) {
    if (auto v = integer<I>(j, key, path, required)) dst = *v;
  }
  void into(bool& dst, const json& j, const char* key, const std::string& path, bool required = true) {
    if (auto v = boolean(j, key, path, required)) dst = *v;
  }
};

}  // namespace

ConfigError::ConfigError(std::vector<std::string> violations)
    : Error(join_lines(violations)), violations_(std::move(violations)) {}

std::vector<std::string> config_violations(const NetworkConfig& cfg) {
  std::vector<std::string> e;
  auto positive = [&](std::int64_t v, const std::string& where) {
    if (v < 1) e.push_back(where + ": must be at least 1, got " + std::to_string(v));
  };
  positive(cfg.input.channels, "$.input.channels");
  positive(cfg.input.height, "$.input.height");
  positive(cfg.input.width, "$.input.width");
  positive(cfg.stem.kernel, "$.stem.kernel");
  positive(cfg.stem.out, "$.stem.out");
  positive(cfg.stem.stride, "$.stem.stride");
  positive(cfg.classes, "$.head.classes");
  positive(cfg.question_dim, "$.question_dim");
  positive(cfg.gate_hidden, "$.gate_hidden");
  positive(cfg.k, "$.k");
  if (cfg.stages.empty()) e.push_back("$.stages: at least one stage is required");

  std::int64_t channels = cfg.stem.out;
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    const auto& s = cfg.stages[i];
    const std::string at = "$.stages[" + std::to_string(i) + "]";
    positive(s.blocks, at + ".blocks");
    positive(s.out, at + ".out");
    positive(s.cardinality, at + ".cardinality");
    positive(s.width, at + ".width");
    positive(s.stride, at + ".stride");
    if (s.in && *s.in != channels)
      e.push_back(at + ".in: channel mismatch, previous layer produces " + std::to_string(channels) +
                  " channels but the stage expects " + std::to_string(*s.in));
    if (s.k) positive(*s.k, at + ".k");
    if (s.gated && cfg.stage_k(i) > s.cardinality)
      e.push_back((s.k ? at + ".k" : std::string("$.k")) + ": k exceeds cardinality (" +
                  std::to_string(cfg.stage_k(i)) + " > " + std::to_string(s.cardinality) + " in stage " +
                  std::to_string(i + 1) + ")");
    channels = s.out;
  }
  if (cfg.post_conv) positive(cfg.post_conv->out, "$.post_conv.out");
  for (std::size_t i = 0; i < cfg.reference_flops.size(); ++i)
    positive(cfg.reference_flops[i].k, "$.reference_flops[" + std::to_string(i) + "].k");

  if (e.empty()) {
    try {
      stage_output_extents(cfg);
    } catch (const Error& err) {
      e.push_back(std::string("$.input: ") + err.what());
    }
  }
  return e;
}

NetworkConfig parse_config(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& err) {
    throw ConfigError({std::string("$: malformed JSON: ") + err.what()});
  }
  Reader r;
  NetworkConfig cfg;
  if (!r.object(doc, "$", {"name", "input", "stem", "stages", "post_conv", "head", "question_dim", "gate_hidden", "k",
                           "seed", "reference_flops"}))
    throw ConfigError(r.errors);

  if (doc.contains("name")) {
    if (doc["name"].is_string())
      cfg.name = doc["name"].get<std::string>();
    else
      r.errors.push_back("$.name: expected a string");
  } else {
    r.errors.push_back("$.name: missing required field");
  }

  if (!doc.contains("input")) {
    r.errors.push_back("$.input: missing required field");
  } else if (r.object(doc["input"], "$.input", {"channels", "height", "width"})) {
    r.into(cfg.input.channels, doc["input"], "channels", "$.input");
    r.into(cfg.input.height, doc["input"], "height", "$.input");
    r.into(cfg.input.width, doc["input"], "width", "$.input");
  }

  if (!doc.contains("stem")) {
    r.errors.push_back("$.stem: missing required field");
  } else if (r.object(doc["stem"], "$.stem", {"kernel", "out", "stride", "maxpool"})) {
    r.into(cfg.stem.kernel, doc["stem"], "kernel", "$.stem");
    r.into(cfg.stem.out, doc["stem"], "out", "$.stem");
    r.into(cfg.stem.stride, doc["stem"], "stride", "$.stem");
    r.into(cfg.stem.maxpool, doc["stem"], "maxpool", "$.stem", false);
  }

  if (!doc.contains("stages")) {
    r.errors.push_back("$.stages: missing required field");
  } else if (!doc["stages"].is_array()) {
    r.errors.push_back("$.stages: expected an array");
  } else {
    for (std::size_t i = 0; i < doc["stages"].size(); ++i) {
      const auto& js = doc["stages"][i];
      const std::string at = "$.stages[" + std::to_string(i) + "]";
      StageConfig s;
      if (r.object(js, at, {"blocks", "out", "cardinality", "width", "stride", "gated", "k", "in"})) {
        r.into(s.blocks, js, "blocks", at);
        r.into(s.out, js, "out", at);
        r.into(s.cardinality, js, "cardinality", at);
        r.into(s.width, js, "width", at);
        r.into(s.stride, js, "stride", at);
        r.into(s.gated, js, "gated", at, false);
        s.k = r.integer<std::int64_t>(js, "k", at, false);
        s.in = r.integer<std::int64_t>(js, "in", at, false);
      }
      cfg.stages.push_back(s);
    }
  }

  if (doc.contains("post_conv") && r.object(doc["post_conv"], "$.post_conv", {"out", "bn_relu"})) {
    PostConvSpec pc;
    r.into(pc.out, doc["post_conv"], "out", "$.post_conv");
    r.into(pc.bn_relu, doc["post_conv"], "bn_relu", "$.post_conv", false);
    cfg.post_conv = pc;
  }

  if (!doc.contains("head")) {
    r.errors.push_back("$.head: missing required field");
  } else if (r.object(doc["head"], "$.head", {"classes"})) {
    r.into(cfg.classes, doc["head"], "classes", "$.head");
  }

  r.into(cfg.question_dim, doc, "question_dim", "$");
  r.into(cfg.gate_hidden, doc, "gate_hidden", "$", false);
  r.into(cfg.k, doc, "k", "$");
  r.into(cfg.seed, doc, "seed", "$");

  if (doc.contains("reference_flops")) {
    if (!doc["reference_flops"].is_array()) {
      r.errors.push_back("$.reference_flops: expected an array");
    } else {
      for (std::size_t i = 0; i < doc["reference_flops"].size(); ++i) {
        const auto& jr = doc["reference_flops"][i];
        const std::string at = "$.reference_flops[" + std::to_string(i) + "]";
        ReferenceFlops ref;
        if (r.object(jr, at, {"k", "flops"})) {
          r.into(ref.k, jr, "k", at);
          if (jr.contains("flops") && jr["flops"].is_number())
            ref.flops = jr["flops"].get<double>();
          else
            r.errors.push_back(at + ".flops: expected a number");
        }
        cfg.reference_flops.push_back(ref);
      }
    }
  }

  if (r.errors.empty()) r.errors = config_violations(cfg);
  if (!r.errors.empty()) throw ConfigError(r.errors);
  return cfg;
}

NetworkConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    std::vector<std::string> v;
    for (const auto& line : e.violations()) v.push_back(path.string() + ": " + line);
    throw ConfigError(v);
  }
}

std::string serialize_config(const NetworkConfig& cfg) {
  ordered_json j;
  j["name"] = cfg.name;
  j["input"] = {{"channels", cfg.input.channels}, {"height", cfg.input.height}, {"width", cfg.input.width}};
  j["stem"] = {{"kernel", cfg.stem.kernel}, {"out", cfg.stem.out}, {"stride", cfg.stem.stride},
               {"maxpool", cfg.stem.maxpool}};
  j["stages"] = ordered_json::array();
  for (const auto& s : cfg.stages) {
    ordered_json js = {{"blocks", s.blocks},          {"out", s.out},       {"cardinality", s.cardinality},
                       {"width", s.width},            {"stride", s.stride}, {"gated", s.gated}};
    if (s.k) js["k"] = *s.k;
    if (s.in) js["in"] = *s.in;
    j["stages"].push_back(js);
  }
  if (cfg.post_conv) j["post_conv"] = {{"out", cfg.post_conv->out}, {"bn_relu", cfg.post_conv->bn_relu}};
  j["head"] = {{"classes", cfg.classes}};
  j["question_dim"] = cfg.question_dim;
  j["gate_hidden"] = cfg.gate_hidden;
  j["k"] = cfg.k;
  j["seed"] = cfg.seed;
  if (!cfg.reference_flops.empty()) {
    j["reference_flops"] = ordered_json::array();
    for (const auto& r : cfg.reference_flops) j["reference_flops"].push_back({{"k", r.k}, {"flops", r.flops}});
  }
  return j.dump(2) + "\n";
}

std::vector<LayerExtent> stage_output_extents(const NetworkConfig& cfg) {
  std::vector<LayerExtent> out;
  std::int64_t h = conv_output_extent(cfg.input.height, cfg.stem.kernel, cfg.stem.stride, cfg.stem.kernel / 2);
  std::int64_t w = conv_output_extent(cfg.input.width, cfg.stem.kernel, cfg.stem.stride, cfg.stem.kernel / 2);
  out.push_back({"stem", cfg.stem.out, h, w});
  if (cfg.stem.maxpool) {
    const Pool2dSpec pool;
    h = conv_output_extent(h, pool.kernel, pool.stride, pool.padding);
    w = conv_output_extent(w, pool.kernel, pool.stride, pool.padding);
  }
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    h = conv_output_extent(h, 3, cfg.stages[i].stride, 1);
    w = conv_output_extent(w, 3, cfg.stages[i].stride, 1);
    out.push_back({"stage" + std::to_string(i + 1), cfg.stages[i].out, h, w});
  }
  if (cfg.post_conv) out.push_back({"post_conv", cfg.post_conv->out, h, w});
  return out;
}

}  // namespace gmc
