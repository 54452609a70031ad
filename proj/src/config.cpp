#include "immunity/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include <json.hpp>

#include "immunity/error.hpp"

namespace immunity {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

double parse_plain(std::string_view text) {
  const std::string s = trim(text);
  double v = 0.0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || end != s.data() + s.size() || !std::isfinite(v)) {
    throw ConfigError("'" + s + "' is not a number");
  }
  return v;
}

std::size_t parse_count(const std::string& text) {
  const std::string s = trim(text);
  std::size_t v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || end != s.data() + s.size()) {
    throw ConfigError("'" + s + "' is not a non-negative integer");
  }
  return v;
}

bool parse_bool(const std::string& text) {
  const std::string s = trim(text);
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("'" + s + "' is not a boolean (true/false)");
}

std::vector<std::size_t> parse_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_count(item));
  if (out.empty()) throw ConfigError("empty list");
  return out;
}

}  // namespace

double parse_number(std::string_view text) {
  const auto slash = text.find('/');
  if (slash == std::string_view::npos) return parse_plain(text);
  const double num = parse_plain(text.substr(0, slash));
  const double den = parse_plain(text.substr(slash + 1));
  if (den == 0.0) throw ConfigError("'" + trim(text) + "' divides by zero");
  return num / den;
}

RsgMode parse_rsg_mode(const std::string& text) {
  const std::string s = trim(text);
  if (s == "identity") return RsgMode::identity();
  if (s == "fresh") return RsgMode::fresh();
  if (s.rfind("fixed:", 0) == 0) return RsgMode::fixed(parse_list(s.substr(6)));
  throw ConfigError("unknown rsg mode '" + s + "', expected identity, fresh or fixed:<perm>");
}

std::string to_string(const RsgMode& rsg) {
  switch (rsg.kind()) {
    case RsgMode::Kind::identity: return "identity";
    case RsgMode::Kind::fresh_permutation: return "fresh";
    case RsgMode::Kind::fixed_permutation: {
      std::string s = "fixed:";
      for (std::size_t i = 0; i < rsg.permutation().size(); ++i) {
        s += (i ? "," : "") + std::to_string(rsg.permutation()[i]);
      }
      return s;
    }
  }
  return "identity";
}

const std::vector<std::string>& RunConfig::known_keys() {
  static const std::vector<std::string> keys{
      // model
      "n_experts", "widths", "seed",
      // training
      "learning_rate", "weight_decay", "momentum", "epochs", "batch_size", "grad_clip", "alpha", "beta", "gamma", "mode",
      "augment", "rsg_train", "rsg_eval",
      // inner attack for adversarial training
      "inner_attack", "inner_epsilon", "inner_step_size", "inner_iterations", "inner_momentum_decay",
      "inner_random_start",
      // evaluation attack
      "attack", "epsilon", "step_size", "iterations", "momentum_decay", "random_start", "rsg_handling", "descent",
      // metrics
      "iscore_samples", "eval_batch_size"};
  return keys;
}

namespace {
bool is_known(const std::string& key) {
  const auto& k = RunConfig::known_keys();
  return std::find(k.begin(), k.end(), key) != k.end();
}
}  // namespace

RunConfig RunConfig::parse(std::string_view text, const std::string& source) {
  RunConfig cfg;
  std::vector<std::string> problems;
  std::istringstream in{std::string(text)};
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const std::string body = trim(line.substr(0, line.find('#')));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = source + ":" + std::to_string(n) + ": ";
    if (eq == std::string::npos) {
      problems.push_back(where + "expected 'key = value', got '" + body + "'");
      continue;
    }
    const std::string key = trim(body.substr(0, eq));
    const std::string value = trim(body.substr(eq + 1));
    if (!is_known(key)) {
      problems.push_back(where + "unknown key '" + key + "'");
    } else if (value.empty()) {
      problems.push_back(where + "missing value for '" + key + "'");
    } else if (cfg.values_.count(key)) {
      problems.push_back(where + "duplicate key '" + key + "'");
    } else {
      cfg.values_[key] = value;
    }
  }
  if (!problems.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (!is_known(key)) throw ConfigError("unknown key '" + key + "'");
  values_[key] = trim(value);
}

ResolvedConfig resolve(const RunConfig& config, bool require_coefficients) {
  ResolvedConfig r;
  std::vector<std::string> problems;
  const auto& v = config.values();
  auto field = [&](const std::string& key, const std::function<void(const std::string&)>& apply) {
    auto it = v.find(key);
    if (it == v.end()) return;
    try {
      apply(it->second);
    } catch (const ConfigError& e) {
      problems.push_back(key + ": " + e.what());
    }
  };

  if (require_coefficients) {
    for (const char* key : {"alpha", "beta", "gamma"}) {
      if (!v.count(key)) problems.push_back(std::string(key) + ": required but not set");
    }
  }

  TrainConfig& t = r.train;
  field("n_experts", [&](const std::string& s) { r.n_experts = parse_count(s); });
  field("widths", [&](const std::string& s) { r.widths = parse_list(s); });
  field("seed", [&](const std::string& s) { t.seed = parse_count(s); });
  field("learning_rate", [&](const std::string& s) { t.learning_rate = parse_number(s); });
  field("weight_decay", [&](const std::string& s) { t.weight_decay = parse_number(s); });
  field("momentum", [&](const std::string& s) { t.momentum = parse_number(s); });
  field("epochs", [&](const std::string& s) { t.epochs = parse_count(s); });
  field("batch_size", [&](const std::string& s) { t.batch_size = parse_count(s); });
  field("grad_clip", [&](const std::string& s) { t.grad_clip = parse_number(s); });
  field("alpha", [&](const std::string& s) { t.coefficients.alpha = parse_number(s); });
  field("beta", [&](const std::string& s) { t.coefficients.beta = parse_number(s); });
  field("gamma", [&](const std::string& s) { t.coefficients.gamma = parse_number(s); });
  field("mode", [&](const std::string& s) { t.mode = parse_train_mode(s); });
  field("augment", [&](const std::string& s) { t.augment = parse_bool(s); });
  field("rsg_train", [&](const std::string& s) { t.rsg_train = parse_rsg_mode(s); });
  field("rsg_eval", [&](const std::string& s) { t.rsg_eval = parse_rsg_mode(s); });

  AttackSpec& in = t.inner_attack;
  field("inner_attack", [&](const std::string& s) { in.kind = parse_attack_kind(s); });
  field("inner_epsilon", [&](const std::string& s) { in.epsilon = parse_number(s); });
  field("inner_step_size", [&](const std::string& s) { in.step_size = parse_number(s); });
  field("inner_iterations", [&](const std::string& s) { in.iterations = parse_count(s); });
  field("inner_momentum_decay", [&](const std::string& s) { in.momentum_decay = parse_number(s); });
  field("inner_random_start", [&](const std::string& s) { in.random_start = parse_bool(s); });

  AttackSpec a;
  bool attack_enabled = true;
  field("attack", [&](const std::string& s) {
    if (s == "none") {
      attack_enabled = false;
    } else {
      a.kind = parse_attack_kind(s);
    }
  });
  field("epsilon", [&](const std::string& s) { a.epsilon = parse_number(s); });
  field("step_size", [&](const std::string& s) { a.step_size = parse_number(s); });
  field("iterations", [&](const std::string& s) { a.iterations = parse_count(s); });
  field("momentum_decay", [&](const std::string& s) { a.momentum_decay = parse_number(s); });
  field("random_start", [&](const std::string& s) { a.random_start = parse_bool(s); });
  field("rsg_handling", [&](const std::string& s) { a.rsg_handling = parse_rsg_handling(s); });
  field("descent", [&](const std::string& s) { a.descent = parse_bool(s); });
  field("iscore_samples", [&](const std::string& s) { r.iscore_samples = parse_count(s); });
  field("eval_batch_size", [&](const std::string& s) { r.eval_batch_size = parse_count(s); });

  if (r.n_experts < 2) problems.push_back("n_experts: at least 2 experts required");
  if (r.eval_batch_size == 0) problems.push_back("eval_batch_size: must be positive");
  for (const auto& p : t.problems()) problems.push_back(p);
  if (attack_enabled) {
    try {
      a.validate();
    } catch (const ConfigError& e) {
      problems.emplace_back(e.what());
    }
    r.attack = a;
  }
  if (!problems.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
  return r;
}

namespace {

nlohmann::ordered_json attack_json(const AttackSpec& a) {
  nlohmann::ordered_json j;
  j["kind"] = to_string(a.kind);
  j["epsilon"] = a.epsilon;
  j["step_size"] = a.step_size;
  j["iterations"] = a.iterations;
  j["momentum_decay"] = a.momentum_decay;
  j["random_start"] = a.random_start;
  j["rsg_handling"] = to_string(a.rsg_handling);
  j["descent"] = a.descent;
  return j;
}

}  // namespace

std::string ResolvedConfig::echo_json() const {
  nlohmann::ordered_json j;
  j["n_experts"] = n_experts;
  j["widths"] = widths;
  j["seed"] = train.seed;
  j["learning_rate"] = train.learning_rate;
  j["weight_decay"] = train.weight_decay;
  j["momentum"] = train.momentum;
  j["epochs"] = train.epochs;
  j["batch_size"] = train.batch_size;
  j["grad_clip"] = train.grad_clip;
  j["alpha"] = train.coefficients.alpha;
  j["beta"] = train.coefficients.beta;
  j["gamma"] = train.coefficients.gamma;
  j["mode"] = to_string(train.mode);
  j["augment"] = train.augment;
  j["rsg_train"] = to_string(train.rsg_train);
  j["rsg_eval"] = to_string(train.rsg_eval);
  j["inner_attack"] = attack_json(train.inner_attack);
  j["attack"] = attack ? attack_json(*attack) : nlohmann::ordered_json("none");
  j["iscore_samples"] = iscore_samples;
  j["eval_batch_size"] = eval_batch_size;
  j["detached_cam_weights"] = true;
  return j.dump();
}

}  // namespace immunity
