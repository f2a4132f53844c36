#include "mtat/config.hpp"

#include <fstream>
#include <sstream>

#include "mtat/checkpoint.hpp"

namespace mtat {

using nlohmann::json;

void MetaConfig::validate() const {
  if (n_iter < 0) throw ConfigError("meta.n_iter must be non-negative");
  if (batch_size < 1) throw ConfigError("meta.batch_size must be at least 1");
  if (k_a < 1) throw ConfigError("meta.k_a must be at least 1");
  if (k_b < 1) throw ConfigError("meta.k_b must be at least 1");
  if (n_gen < 1) throw ConfigError("meta.n_gen must be at least 1");
  if (!(lr_disc > 0 && lr_gen > 0 && lr_outer > 0)) throw ConfigError("meta learning rates must be positive");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("meta betas must lie in [0, 1)");
  if (checkpoint_every < 0) throw ConfigError("meta.checkpoint_every must be non-negative");
  try {
    parse_optimizer_kind(inner_optimizer);
    parse_optimizer_kind(outer_optimizer);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("meta: ") + e.what());
  }
}

AttributeSet RunConfig::attribute_set() const {
  const AttributeSet defaults;
  AttributeSet a;
  a.names = data.attributes;
  a.palette.clear();
  for (const auto& n : a.names) {
    const auto it = std::find(defaults.names.begin(), defaults.names.end(), n);
    if (it != defaults.names.end()) {
      a.palette.push_back(defaults.palette[static_cast<std::size_t>(it - defaults.names.begin())]);
    } else if (data.source == "synthetic") {
      throw ConfigError("no synthetic colour for attribute '" + n + "'");
    } else {
      a.palette.push_back({0, 0, 0});
    }
  }
  return a;
}

std::int64_t RunConfig::held_out_index() const {
  for (std::size_t i = 0; i < data.attributes.size(); ++i) {
    if (data.attributes[i] == fewshot.held_out) return static_cast<std::int64_t>(i);
  }
  throw ConfigError("fewshot.held_out '" + fewshot.held_out + "' is not one of data.attributes");
}

void RunConfig::finalize() {
  if (data.source != "synthetic" && data.source != "folder") {
    throw ConfigError("data.source must be 'synthetic' or 'folder', got '" + data.source + "'");
  }
  if (data.source == "folder" && (data.image_dir.empty() || data.attr_file.empty())) {
    throw ConfigError("data.source 'folder' needs data.image_dir and data.attr_file");
  }
  if (data.n_per_domain < 1 || data.image_size < 1 || data.n_test < 1) {
    throw ConfigError("data sizes must be positive");
  }
  try {
    attribute_set().validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("data.attributes: ") + e.what());
  }
  const auto k = static_cast<std::int64_t>(data.attributes.size());
  generator.image_size = discriminator.image_size = data.image_size;
  generator.n_domains = discriminator.n_domains = k;
  generator.image_channels = discriminator.image_channels = 3;
  try {
    generator.validate();
    discriminator.validate();
    loss.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  meta.validate();
  held_out_index();
  if (k < 3) throw ConfigError("need at least 2 trained attributes besides the held-out one");
  if (fewshot.n_samples < 1 || fewshot.trials < 1 || fewshot.threads < 0) {
    throw ConfigError("fewshot sizes must be positive");
  }
  for (const auto v : fewshot.grid_samples) {
    if (v < 1) throw ConfigError("fewshot.grid_samples entries must be positive");
  }
  for (const auto v : fewshot.grid_steps) {
    if (v < 0) throw ConfigError("fewshot.grid_steps entries must be non-negative");
  }
  if (probe.max_steps < 1 || probe.batch_size < 1 || probe.eval_every < 1 || !(probe.lr > 0)) {
    throw ConfigError("probe settings must be positive");
  }
}

json to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["data"] = {{"source", c.data.source},         {"image_dir", c.data.image_dir},
               {"attr_file", c.data.attr_file},   {"attributes", c.data.attributes},
               {"n_per_domain", c.data.n_per_domain}, {"image_size", c.data.image_size},
               {"n_test", c.data.n_test},         {"seed", c.data.seed}};
  j["generator"] = {{"base_width", c.generator.base_width},
                    {"n_downsample", c.generator.n_downsample},
                    {"n_resblocks", c.generator.n_resblocks}};
  j["discriminator"] = {{"base_width", c.discriminator.base_width}, {"n_layers", c.discriminator.n_layers}};
  const auto& m = c.meta;
  j["meta"] = {{"n_iter", m.n_iter},       {"batch_size", m.batch_size},
               {"k_a", m.k_a},             {"k_b", m.k_b},
               {"n_gen", m.n_gen},         {"lr_disc", m.lr_disc},
               {"lr_gen", m.lr_gen},       {"lr_outer", m.lr_outer},
               {"beta1", m.beta1},         {"beta2", m.beta2},
               {"inner_optimizer", m.inner_optimizer}, {"outer_optimizer", m.outer_optimizer},
               {"checkpoint_every", m.checkpoint_every}};
  j["loss"] = {{"adv", c.loss.adv}, {"cls", c.loss.cls}, {"cycle", c.loss.cycle}, {"gp", c.loss.gp}};
  j["fewshot"] = {{"held_out", c.fewshot.held_out},
                  {"n_samples", c.fewshot.n_samples},
                  {"grid_samples", c.fewshot.grid_samples},
                  {"grid_steps", c.fewshot.grid_steps},
                  {"trials", c.fewshot.trials},
                  {"threads", c.fewshot.threads}};
  j["probe"] = {{"max_steps", c.probe.max_steps}, {"batch_size", c.probe.batch_size},
                {"lr", c.probe.lr},               {"eval_every", c.probe.eval_every},
                {"stop_accuracy", c.probe.stop_accuracy}, {"min_accuracy", c.probe.min_accuracy},
                {"seed", c.probe.seed}};
  return j;
}

namespace {

void check_keys(const json& given, const json& known, const std::string& path) {
  if (!given.is_object()) throw ConfigError("config" + (path.empty() ? "" : " section '" + path + "'") + " must be an object");
  for (const auto& [k, v] : given.items()) {
    const std::string p = path.empty() ? k : path + "." + k;
    if (!known.contains(k)) throw ConfigError("unknown config key '" + p + "'");
    if (known[k].is_object()) check_keys(v, known[k], p);
  }
}

template <typename U>
void read(const json& j, const char* section, const char* key, U& out) {
  const json& s = section ? j.at(section) : j;
  try {
    out = s.at(key).get<U>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config key '") + (section ? std::string(section) + "." : "") + key +
                      "' has the wrong type");
  }
}

void collect_paths(const json& j, const std::string& prefix, std::vector<std::string>& out) {
  for (const auto& [k, v] : j.items()) {
    const std::string p = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object()) collect_paths(v, p, out);
    else out.push_back(p);
  }
}

}  // namespace

RunConfig config_from_json(const json& given) {
  const json defaults = to_json(RunConfig{});
  check_keys(given, defaults, "");
  json j = defaults;
  j.merge_patch(given);
  RunConfig c;
  read(j, nullptr, "seed", c.seed);
  read(j, "data", "source", c.data.source);
  read(j, "data", "image_dir", c.data.image_dir);
  read(j, "data", "attr_file", c.data.attr_file);
  read(j, "data", "attributes", c.data.attributes);
  read(j, "data", "n_per_domain", c.data.n_per_domain);
  read(j, "data", "image_size", c.data.image_size);
  read(j, "data", "n_test", c.data.n_test);
  read(j, "data", "seed", c.data.seed);
  read(j, "generator", "base_width", c.generator.base_width);
  read(j, "generator", "n_downsample", c.generator.n_downsample);
  read(j, "generator", "n_resblocks", c.generator.n_resblocks);
  read(j, "discriminator", "base_width", c.discriminator.base_width);
  read(j, "discriminator", "n_layers", c.discriminator.n_layers);
  read(j, "meta", "n_iter", c.meta.n_iter);
  read(j, "meta", "batch_size", c.meta.batch_size);
  read(j, "meta", "k_a", c.meta.k_a);
  read(j, "meta", "k_b", c.meta.k_b);
  read(j, "meta", "n_gen", c.meta.n_gen);
  read(j, "meta", "lr_disc", c.meta.lr_disc);
  read(j, "meta", "lr_gen", c.meta.lr_gen);
  read(j, "meta", "lr_outer", c.meta.lr_outer);
  read(j, "meta", "beta1", c.meta.beta1);
  read(j, "meta", "beta2", c.meta.beta2);
  read(j, "meta", "inner_optimizer", c.meta.inner_optimizer);
  read(j, "meta", "outer_optimizer", c.meta.outer_optimizer);
  read(j, "meta", "checkpoint_every", c.meta.checkpoint_every);
  read(j, "loss", "adv", c.loss.adv);
  read(j, "loss", "cls", c.loss.cls);
  read(j, "loss", "cycle", c.loss.cycle);
  read(j, "loss", "gp", c.loss.gp);
  read(j, "fewshot", "held_out", c.fewshot.held_out);
  read(j, "fewshot", "n_samples", c.fewshot.n_samples);
  read(j, "fewshot", "grid_samples", c.fewshot.grid_samples);
  read(j, "fewshot", "grid_steps", c.fewshot.grid_steps);
  read(j, "fewshot", "trials", c.fewshot.trials);
  read(j, "fewshot", "threads", c.fewshot.threads);
  read(j, "probe", "max_steps", c.probe.max_steps);
  read(j, "probe", "batch_size", c.probe.batch_size);
  read(j, "probe", "lr", c.probe.lr);
  read(j, "probe", "eval_every", c.probe.eval_every);
  read(j, "probe", "stop_accuracy", c.probe.stop_accuracy);
  read(j, "probe", "min_accuracy", c.probe.min_accuracy);
  read(j, "probe", "seed", c.probe.seed);
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  return config_from_json(j);
}

std::string canonical_text(const RunConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

std::array<std::uint8_t, 32> config_digest(const RunConfig& cfg) { return sha256(canonical_text(cfg)); }

std::vector<std::string> config_leaf_paths() {
  std::vector<std::string> out;
  collect_paths(to_json(RunConfig{}), "", out);
  return out;
}

void set_config_value(json& j, const std::string& dotted, const std::string& value) {
  const json defaults = to_json(RunConfig{});
  json::json_pointer ptr("/" + [&] {
    std::string s = dotted;
    std::replace(s.begin(), s.end(), '.', '/');
    return s;
  }());
  if (!defaults.contains(ptr)) throw ConfigError("unknown config key '" + dotted + "'");
  const json& proto = defaults.at(ptr);
  auto parse_scalar = [&](const json& like, const std::string& text) -> json {
    try {
      std::size_t used = 0;
      if (like.is_string()) return text;
      if (like.is_boolean()) {
        if (text == "true" || text == "1") return true;
        if (text == "false" || text == "0") return false;
        throw ConfigError("");
      }
      if (like.is_number_unsigned()) {
        if (!text.empty() && text[0] == '-') throw ConfigError("");
        const auto v = std::stoull(text, &used);
        if (used != text.size()) throw ConfigError("");
        return v;
      }
      if (like.is_number_integer()) {
        const auto v = std::stoll(text, &used);
        if (used != text.size()) throw ConfigError("");
        return v;
      }
      const auto v = std::stod(text, &used);
      if (used != text.size()) throw ConfigError("");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("invalid value '" + text + "' for config key '" + dotted + "'");
    }
  };
  if (proto.is_array()) {
    json arr = json::array();
    const json like = proto.empty() ? json("") : proto[0];
    std::stringstream ss(value);
    for (std::string item; std::getline(ss, item, ',');) arr.push_back(parse_scalar(like, item));
    j[ptr] = arr;
  } else {
    j[ptr] = parse_scalar(proto, value);
  }
}

}  // namespace mtat
