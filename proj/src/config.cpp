#include "ftpg/config.hpp"

#include <cstdlib>

namespace ftpg {

using nlohmann::ordered_json;

ExperimentConfig preset(std::string_view name) {
  ExperimentConfig cfg;
  if (name == "desk") {
    cfg.synth.num_datasets = 6;
    cfg.synth.classes_per_dataset = 40;
    cfg.synth.dim = 32;
    cfg.fed.rounds = 100;
    cfg.fed.batch_size = 32;
    cfg.fed.lr = 0.1;
    cfg.classes_per_client = 10;
    return cfg;
  }
  if (name == "paper") {
    cfg.synth.num_datasets = 6;
    cfg.synth.classes_per_dataset = 200;
    cfg.synth.dim = 512;
    cfg.fed.rounds = 500;
    cfg.fed.batch_size = 200;
    cfg.fed.lr = 0.003;
    cfg.classes_per_client = 20;
    return cfg;
  }
  throw ConfigError("unknown preset '" + std::string(name) + "' (expected desk or paper)");
}

namespace {

ordered_json optional_seed(const std::optional<std::uint64_t>& s) {
  return s ? ordered_json(*s) : ordered_json(nullptr);
}

void merge_strict(ordered_json& base, const ordered_json& update, const std::string& path) {
  if (!update.is_object()) throw ConfigError("config: '" + path + "' must be an object");
  for (auto it = update.begin(); it != update.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("config: unknown key '" + key + "'");
    ordered_json& slot = base[it.key()];
    if (slot.is_object()) {
      merge_strict(slot, it.value(), key);
    } else {
      slot = it.value();
    }
  }
}

template <typename T>
T get(const ordered_json& j, const char* section, const char* key) {
  const ordered_json& v = section ? j.at(section).at(key) : j.at(key);
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError("");
      if constexpr (std::is_unsigned_v<T>)
        if (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)
          throw ConfigError("");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("");
    } else {
      if (!v.is_string()) throw ConfigError("");
    }
    return v.get<T>();
  } catch (const std::exception&) {
    throw ConfigError(std::string("config: '") + (section ? std::string(section) + "." : "") + key +
                      "' has the wrong type");
  }
}

std::optional<std::uint64_t> get_seed(const ordered_json& j, const char* key) {
  const ordered_json& v = j.at("synth").at(key);
  if (v.is_null()) return std::nullopt;
  return get<std::uint64_t>(j, "synth", key);
}

}  // namespace

ordered_json to_json(const ExperimentConfig& c) {
  ordered_json j;
  j["method"] = std::string(method_name(c.method));
  j["seed"] = c.seed;
  j["store"] = c.store;
  j["synth"] = {
      {"num_datasets", c.synth.num_datasets},
      {"classes_per_dataset", c.synth.classes_per_dataset},
      {"train_shots", c.synth.train_shots},
      {"eval_images_per_class", c.synth.eval_images_per_class},
      {"noise_sigma", c.synth.noise_sigma},
      {"dataset_context_spread", c.synth.dataset_context_spread},
      {"domain_shift", c.synth.domain_shift},
      {"dim", c.synth.dim},
      {"prompt_len", c.synth.prompt_len},
      {"seed", optional_seed(c.world_seed)},
      {"encoder_seed", optional_seed(c.encoder_seed)},
  };
  j["model"] = {{"heads", c.heads}, {"kg_lambda", c.kg_lambda}};
  j["predict"] = {{"temperature", c.predict.temperature}};
  j["fed"] = {
      {"rounds", c.fed.rounds},
      {"local_steps", c.fed.local_steps},
      {"participation", c.fed.participation},
      {"lr", c.fed.lr},
      {"momentum", c.fed.momentum},
      {"weight_decay", c.fed.weight_decay},
      {"batch_size", c.fed.batch_size},
      {"eval_every", c.fed.eval_every},
      {"threads", c.fed.threads},
  };
  j["partition"] = {{"classes_per_client", c.classes_per_client},
                    {"shots", c.shots},
                    {"allow_mixed_shards", c.allow_mixed_shards}};
  j["eval"] = {{"hm_terms", c.hm_terms}};
  return j;
}

ExperimentConfig from_json(const ordered_json& user, const ExperimentConfig& defaults) {
  ordered_json j = to_json(defaults);
  merge_strict(j, user, "");
  ExperimentConfig c;
  c.method = parse_method(get<std::string>(j, nullptr, "method"));
  c.seed = get<std::uint64_t>(j, nullptr, "seed");
  c.store = get<std::string>(j, nullptr, "store");
  c.synth.num_datasets = get<int>(j, "synth", "num_datasets");
  c.synth.classes_per_dataset = get<int>(j, "synth", "classes_per_dataset");
  c.synth.train_shots = get<int>(j, "synth", "train_shots");
  c.synth.eval_images_per_class = get<int>(j, "synth", "eval_images_per_class");
  c.synth.noise_sigma = get<double>(j, "synth", "noise_sigma");
  c.synth.dataset_context_spread = get<double>(j, "synth", "dataset_context_spread");
  c.synth.domain_shift = get<double>(j, "synth", "domain_shift");
  c.synth.dim = get<std::uint32_t>(j, "synth", "dim");
  c.synth.prompt_len = get<std::uint32_t>(j, "synth", "prompt_len");
  c.world_seed = get_seed(j, "seed");
  c.encoder_seed = get_seed(j, "encoder_seed");
  c.heads = get<int>(j, "model", "heads");
  c.kg_lambda = get<double>(j, "model", "kg_lambda");
  c.predict.temperature = get<double>(j, "predict", "temperature");
  c.fed.rounds = get<int>(j, "fed", "rounds");
  c.fed.local_steps = get<int>(j, "fed", "local_steps");
  c.fed.participation = get<double>(j, "fed", "participation");
  c.fed.lr = get<double>(j, "fed", "lr");
  c.fed.momentum = get<double>(j, "fed", "momentum");
  c.fed.weight_decay = get<double>(j, "fed", "weight_decay");
  c.fed.batch_size = get<int>(j, "fed", "batch_size");
  c.fed.eval_every = get<int>(j, "fed", "eval_every");
  c.fed.threads = get<int>(j, "fed", "threads");
  c.classes_per_client = get<int>(j, "partition", "classes_per_client");
  c.shots = get<int>(j, "partition", "shots");
  c.allow_mixed_shards = get<bool>(j, "partition", "allow_mixed_shards");
  c.hm_terms = get<int>(j, "eval", "hm_terms");
  return c;
}

void apply_override(ordered_json& j, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0)
    throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
  const std::string key(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  ordered_json value = ordered_json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  ordered_json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' is malformed");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    if (!node->contains(part)) (*node)[part] = ordered_json::object();
    node = &(*node)[part];
    if (!node->is_object()) throw ConfigError("override key '" + key + "' descends into a value");
    start = dot + 1;
  }
}

SynthConfig resolved_synth(const ExperimentConfig& cfg) {
  SynthConfig s = cfg.synth;
  s.seed = cfg.world_seed.value_or(cfg.seed);
  s.encoder_seed = cfg.encoder_seed.value_or(cfg.seed);
  s.train_shots = std::max(s.train_shots, 1);
  return s;
}

ExperimentConfig resolve(ExperimentConfig cfg) {
  cfg.fed.seed = cfg.seed;
  if (cfg.fed.threads < 0) throw ConfigError("fed: threads must be >= 0");
  if (cfg.heads < 1 || cfg.synth.dim % static_cast<std::uint32_t>(cfg.heads) != 0)
    throw ConfigError("model: dim " + std::to_string(cfg.synth.dim) + " is not divisible by heads " +
                      std::to_string(cfg.heads));
  if (!(cfg.predict.temperature > 0.0)) throw ConfigError("predict: temperature must be > 0");
  if (cfg.hm_terms != 2 && cfg.hm_terms != 3) throw ConfigError("eval: hm_terms must be 2 or 3");
  if (cfg.classes_per_client < 1 || cfg.shots < 1)
    throw ConfigError("partition: classes_per_client and shots must be >= 1");
  if (!(cfg.kg_lambda >= 0.0)) throw ConfigError("model: kg_lambda must be >= 0");
  validate(resolved_synth(cfg));
  return cfg;
}

ModelSpec model_spec(const ExperimentConfig& cfg, std::uint32_t prompt_len, std::uint32_t dim) {
  ModelSpec spec;
  spec.method = cfg.method;
  spec.shape = GeneratorShape{static_cast<int>(prompt_len), static_cast<int>(dim), cfg.heads};
  spec.kg_lambda = cfg.kg_lambda;
  if (spec.method == Method::fedtpg && dim % static_cast<std::uint32_t>(cfg.heads) != 0)
    throw ConfigError("model: dim " + std::to_string(dim) + " is not divisible by heads");
  return spec;
}

}  // namespace ftpg
