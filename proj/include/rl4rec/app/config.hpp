#pragma once

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "rl4rec/binary_io.hpp"
#include "rl4rec/buffer/buffer.hpp"
#include "rl4rec/data/dataset.hpp"
#include "rl4rec/data/env.hpp"
#include "rl4rec/data/reward_model.hpp"
#include "rl4rec/exec/executor.hpp"
#include "rl4rec/policy/policy.hpp"
#include "rl4rec/tracker/state_tracker.hpp"

namespace rl4rec::app {

namespace fs = std::filesystem;

inline constexpr const char* kDataRootEnv = "RL4REC_DATA_ROOT";

/// One experiment. Seeds of the individual stages are derived from `seed`, so
/// the per-stage seed fields of the embedded configs are not serialized.
struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string output_dir = "run";
  std::string descriptor;  // as written; see resolve_descriptor()
  data::RewardModelConfig user_model;
  data::RecEnvConfig env;
  tracker::TrackerConfig tracker;
  policy::PolicyConfig policy;
  exec::TrainConfig train;
  buffer::ConstructionMethod construction;
  exec::EvalConfig eval;

  void validate() const {
    if (descriptor.empty()) throw ConfigError("[data] descriptor is required");
    if (user_model.dim == 0) throw ConfigError("[user_model] dim must be positive");
    if (user_model.epochs == 0) throw ConfigError("[user_model] epochs must be positive");
    if (!(user_model.learning_rate > 0.0)) throw ConfigError("[user_model] learning_rate must be positive");
    if (user_model.validation_fraction < 0.0 || user_model.validation_fraction >= 1.0)
      throw ConfigError("[user_model] validation_fraction must be in [0, 1)");
    if (env.max_steps == 0) throw ConfigError("[env] max_steps must be positive");
    env.quit.validate();
    tracker.validate();
    policy.validate();
    train.validate();
    construction.validate();
    eval.validate();
    exec::check_paradigm(policy.kind, train.paradigm);
  }
};

/// Stream-specific seed derived from the experiment seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return Rng(seed ^ (0x9e3779b97f4a7c15ULL * (stream + 1))).next();
}

enum SeedStream : std::uint64_t { kUserModel, kEvalModel, kPolicyInit, kTrain, kEval, kShuffle };

/// The embedded configs with their derived seeds filled in.
inline ExperimentConfig with_derived_seeds(ExperimentConfig c) {
  c.user_model.seed = derive_seed(c.seed, kUserModel);
  c.train.seed = derive_seed(c.seed, kTrain);
  c.eval.seed = derive_seed(c.seed, kEval);
  c.construction.shuffle_seed = derive_seed(c.seed, kShuffle);
  return c;
}

// ---------------------------------------------------------------------------
// Value codecs

namespace detail {

inline std::string format_value(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}
inline std::string format_value(std::size_t v) { return std::to_string(v); }
inline std::string format_value(bool v) { return v ? "true" : "false"; }
inline std::string format_value(const std::string& v) { return v; }
inline std::string format_value(const std::optional<double>& v) { return v ? format_value(*v) : ""; }

inline void parse_value(const std::string& s, double& out, const std::string& what) {
  const char* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  if (ec != std::errc() || p != end || !std::isfinite(out)) throw ConfigError(what + ": not a finite number: '" + s + "'");
}
inline void parse_value(const std::string& s, std::size_t& out, const std::string& what) {
  const char* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  if (s.empty() || ec != std::errc() || p != end) throw ConfigError(what + ": not a non-negative integer: '" + s + "'");
}
inline void parse_value(const std::string& s, bool& out, const std::string& what) {
  if (s == "true") out = true;
  else if (s == "false") out = false;
  else throw ConfigError(what + ": expected true or false, got '" + s + "'");
}
inline void parse_value(const std::string& s, std::string& out, const std::string&) { out = s; }
inline void parse_value(const std::string& s, std::optional<double>& out, const std::string& what) {
  if (s.empty()) {
    out.reset();
    return;
  }
  double v = 0.0;
  parse_value(s, v, what);
  out = v;
}

}  // namespace detail

struct Field {
  std::string section;
  std::string key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

namespace detail {

// `ref` is a generic lambda returning a reference to the member.
template <class Ref>
Field plain(const char* section, const char* key, Ref ref) {
  return {section, key, [ref](const ExperimentConfig& c) { return format_value(ref(c)); },
          [ref, section, key](ExperimentConfig& c, const std::string& s) {
            parse_value(s, ref(c), std::string("[") + section + "] " + key);
          }};
}

template <class Ref, class Fmt, class Parse>
Field coded(const char* section, const char* key, Ref ref, Fmt fmt, Parse parse) {
  return {section, key, [ref, fmt](const ExperimentConfig& c) { return std::string(fmt(ref(c))); },
          [ref, parse](ExperimentConfig& c, const std::string& s) { ref(c) = parse(s); }};
}

}  // namespace detail

/// Every serialized key, in canonical order.
inline const std::vector<Field>& config_fields() {
  using detail::coded;
  using detail::plain;
#define RL4REC_REF(expr) [](auto& c) -> auto& { return expr; }
  static const std::vector<Field> fields = {
      plain("experiment", "seed", RL4REC_REF(c.seed)),
      plain("experiment", "output_dir", RL4REC_REF(c.output_dir)),
      plain("data", "descriptor", RL4REC_REF(c.descriptor)),

      plain("user_model", "dim", RL4REC_REF(c.user_model.dim)),
      plain("user_model", "n_negatives", RL4REC_REF(c.user_model.n_negatives)),
      plain("user_model", "negative_target", RL4REC_REF(c.user_model.negative_target)),
      plain("user_model", "epochs", RL4REC_REF(c.user_model.epochs)),
      plain("user_model", "learning_rate", RL4REC_REF(c.user_model.learning_rate)),
      plain("user_model", "l2", RL4REC_REF(c.user_model.l2)),
      plain("user_model", "init_scale", RL4REC_REF(c.user_model.init_scale)),
      plain("user_model", "head_hidden", RL4REC_REF(c.user_model.head_hidden)),
      plain("user_model", "validation_fraction", RL4REC_REF(c.user_model.validation_fraction)),

      plain("env", "max_steps", RL4REC_REF(c.env.max_steps)),
      plain("env", "quit_enabled", RL4REC_REF(c.env.quit_enabled)),
      plain("env", "remove_recommended", RL4REC_REF(c.env.remove_recommended)),
      plain("env", "quit_window", RL4REC_REF(c.env.quit.window)),
      plain("env", "quit_threshold", RL4REC_REF(c.env.quit.category_threshold)),
      plain("env", "quit_min_reward", RL4REC_REF(c.env.quit.min_reward)),

      coded("tracker", "kind", RL4REC_REF(c.tracker.kind),
            [](tracker::TrackerKind k) { return tracker::to_string(k); }, tracker::parse_tracker_kind),
      plain("tracker", "embedding_dim", RL4REC_REF(c.tracker.embedding_dim)),
      plain("tracker", "max_history", RL4REC_REF(c.tracker.max_history)),
      plain("tracker", "reward_weighting", RL4REC_REF(c.tracker.reward_weighting)),

      coded("policy", "kind", RL4REC_REF(c.policy.kind),
            [](policy::PolicyKind k) { return policy::to_string(k); }, policy::parse_policy_kind),
      plain("policy", "gamma", RL4REC_REF(c.policy.gamma)),
      plain("policy", "learning_rate", RL4REC_REF(c.policy.learning_rate)),
      plain("policy", "max_grad_norm", RL4REC_REF(c.policy.max_grad_norm)),
      plain("policy", "hidden", RL4REC_REF(c.policy.hidden)),
      plain("policy", "entropy_coef", RL4REC_REF(c.policy.entropy_coef)),
      plain("policy", "value_coef", RL4REC_REF(c.policy.value_coef)),
      plain("policy", "normalize_advantage", RL4REC_REF(c.policy.normalize_advantage)),
      plain("policy", "ppo_clip", RL4REC_REF(c.policy.ppo_clip)),
      plain("policy", "ppo_epochs", RL4REC_REF(c.policy.ppo_epochs)),
      plain("policy", "huber", RL4REC_REF(c.policy.huber)),
      plain("policy", "epsilon_start", RL4REC_REF(c.policy.epsilon_start)),
      plain("policy", "epsilon_end", RL4REC_REF(c.policy.epsilon_end)),
      plain("policy", "epsilon_fraction", RL4REC_REF(c.policy.epsilon_fraction)),
      plain("policy", "target_sync", RL4REC_REF(c.policy.target_sync)),
      plain("policy", "ddpg_tau", RL4REC_REF(c.policy.ddpg_tau)),
      plain("policy", "ddpg_noise", RL4REC_REF(c.policy.ddpg_noise)),
      plain("policy", "bcq_threshold", RL4REC_REF(c.policy.bcq_threshold)),
      plain("policy", "cql_alpha", RL4REC_REF(c.policy.cql_alpha)),
      coded("policy", "crr_transform", RL4REC_REF(c.policy.crr_transform),
            [](policy::CrrTransform t) { return t == policy::CrrTransform::Exp ? "exp" : "binary_max"; },
            [](const std::string& s) {
              if (s == "exp") return policy::CrrTransform::Exp;
              if (s == "binary_max") return policy::CrrTransform::BinaryMax;
              throw ConfigError("[policy] crr_transform: expected binary_max or exp, got '" + s + "'");
            }),
      plain("policy", "crr_beta", RL4REC_REF(c.policy.crr_beta)),

      coded("train", "paradigm", RL4REC_REF(c.train.paradigm),
            [](exec::Paradigm p) { return exec::to_string(p); }, exec::parse_paradigm),
      plain("train", "epochs", RL4REC_REF(c.train.epochs)),
      plain("train", "updates_per_epoch", RL4REC_REF(c.train.updates_per_epoch)),
      plain("train", "episodes_per_update", RL4REC_REF(c.train.episodes_per_update)),
      plain("train", "steps_per_update", RL4REC_REF(c.train.steps_per_update)),
      plain("train", "batch_size", RL4REC_REF(c.train.batch_size)),
      plain("train", "n_envs", RL4REC_REF(c.train.n_envs)),
      plain("train", "eval_every", RL4REC_REF(c.train.eval_every)),
      plain("train", "buffer_capacity", RL4REC_REF(c.train.buffer_capacity)),
      coded("train", "construction", RL4REC_REF(c.construction.kind),
            [](buffer::ConstructionKind k) { return buffer::to_string(k); }, buffer::parse_construction_kind),
      plain("train", "construction_window", RL4REC_REF(c.construction.window)),
      plain("train", "construction_max_steps", RL4REC_REF(c.construction.max_steps)),

      // The mode string carries X for NX_X_, so it sets two members.
      Field{"eval", "mode", [](const ExperimentConfig& c) { return exec::mode_name(c.eval); },
            [](ExperimentConfig& c, const std::string& s) { c.eval = exec::parse_eval_mode(s, c.eval); }},
      plain("eval", "n_episodes", RL4REC_REF(c.eval.n_episodes)),
      plain("eval", "max_steps", RL4REC_REF(c.eval.max_steps)),
      plain("eval", "n_envs", RL4REC_REF(c.eval.n_envs)),
  };
#undef RL4REC_REF
  return fields;
}

/// Canonical text form. With include_output false the output directory is
/// left out, which is the form that gets hashed.
inline std::string serialize_config(const ExperimentConfig& c, bool include_output = true) {
  std::ostringstream os;
  std::string section;
  for (const Field& f : config_fields()) {
    if (!include_output && f.section == "experiment" && f.key == "output_dir") continue;
    if (f.section != section) {
      if (!section.empty()) os << '\n';
      section = f.section;
      os << '[' << section << "]\n";
    }
    const std::string v = f.get(c);
    os << f.key << (v.empty() ? " =" : " = ") << v << '\n';
  }
  return os.str();
}

/// Strict parse: unknown sections or keys and repeated keys are errors; keys
/// left out keep their defaults. '#' and ';' start whole-line comments.
inline ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig c;
  std::istringstream in(text);
  std::string line, section;
  std::set<std::string> seen;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = data::trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    const std::string where = "config line " + std::to_string(lineno) + ": ";
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError(where + "unterminated section header");
      section = data::trim(t.substr(1, t.size() - 2));
      bool known = false;
      for (const Field& f : config_fields()) known |= f.section == section;
      if (!known) throw ConfigError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    if (section.empty()) throw ConfigError(where + "key outside any section");
    const std::string key = data::trim(t.substr(0, eq));
    const std::string value = data::trim(t.substr(eq + 1));
    const Field* field = nullptr;
    for (const Field& f : config_fields())
      if (f.section == section && f.key == key) field = &f;
    if (field == nullptr) throw ConfigError(where + "unknown key '" + key + "' in [" + section + "]");
    if (!seen.insert(section + "." + key).second) throw ConfigError(where + "duplicate key '" + key + "'");
    field->set(c, value);
  }
  return c;
}

inline std::string config_hash(const ExperimentConfig& c) { return io::hex64(io::fnv1a(serialize_config(c, false))); }

/// Hash of the settings the user models depend on.
inline std::string prepare_hash(const ExperimentConfig& c) {
  std::string s = std::to_string(c.seed) + '\n' + c.descriptor + '\n';
  for (const Field& f : config_fields())
    if (f.section == "user_model") s += f.key + '=' + f.get(c) + '\n';
  return io::hex64(io::fnv1a(s));
}

/// Relative descriptor paths resolve against $RL4REC_DATA_ROOT when set and
/// against the config file's directory otherwise.
inline fs::path resolve_descriptor(const ExperimentConfig& c, const fs::path& config_dir) {
  fs::path p = c.descriptor;
  if (p.is_relative()) {
    const char* root = std::getenv(kDataRootEnv);
    p = (root != nullptr && *root != '\0' ? fs::path(root) : config_dir) / p;
  }
  return p;
}

struct LoadedConfig {
  ExperimentConfig config;
  fs::path descriptor_path;
};

inline LoadedConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  LoadedConfig out{parse_config(ss.str()), {}};
  out.config.validate();
  out.descriptor_path = resolve_descriptor(out.config, path.parent_path());
  if (!fs::is_regular_file(out.descriptor_path))
    throw DataError("dataset descriptor not found: " + out.descriptor_path.string());
  return out;
}

}  // namespace rl4rec::app
