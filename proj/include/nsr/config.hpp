#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nsr/errors.hpp"
#include "nsr/losses.hpp"
#include "nsr/model.hpp"
#include "nsr/report.hpp"
#include "nsr/trainer.hpp"

namespace nsr {

/// An attack entry of a run: the spec plus how much of the test set it sees.
struct AttackEntry {
  AttackSpec spec;
  /// First n rows of each class; 0 evaluates the whole set.
  std::size_t per_class = 0;
};

/// β sweep: train once per value, keep the best validation accuracy under PGD.
struct SweepConfig {
  std::string param = "beta";  // beta1 for loss1, beta2 for loss2
  std::vector<double> values;
  double eps = 0.1;
  int steps = 20;
};

/// Everything a run needs, bound from one JSON document.
struct RunConfig {
  std::filesystem::path train_csv, test_csv, prepared_dir;
  double train_fraction = 0.8;

  std::string arch = "mlp";
  std::vector<std::size_t> mlp_widths = {187, 128, 128, 128, 32, 5};
  CnnConfig cnn;
  std::string dtype = "f32";

  TrainConfig train;
  std::vector<AttackEntry> attacks;
  std::vector<double> eps_grid = kDefaultEpsGrid;
  std::size_t eval_chunk = 64;
  std::size_t threads = 0;  // 0: NSR_THREADS or hardware concurrency
  SweepConfig sweep;
  std::filesystem::path out_dir = "runs";

  RunConfig() {
    attacks.push_back({pgd_spec(100), 0});
    attacks.push_back({pgd_spec(20), 0});
    attacks.push_back({spsa_spec(), 162});
  }

  std::uint64_t seed() const { return train.seed; }
  void validate() const;
};

namespace detail {

struct KeyDoc {
  const char* path;
  const char* help;
};

/// Documentation for every accepted key; `--help` prints these with defaults.
inline const std::vector<KeyDoc>& config_keys() {
  static const std::vector<KeyDoc> keys = {
      {"data.train_csv", "raw training CSV (188 columns: 187 samples, label)"},
      {"data.test_csv", "raw test CSV"},
      {"data.prepared_dir", "directory written by `prepare` (train.csv, val.csv, test.csv)"},
      {"data.train_fraction", "share of the training file kept for training; the rest is validation"},
      {"model.arch", "mlp or cnn"},
      {"model.dtype", "f32 or f64 parameters and arithmetic"},
      {"model.mlp.widths", "dense widths; ReLU after all but the last two dense layers"},
      {"model.cnn.blocks", "residual blocks"},
      {"model.cnn.channels", "convolution channels"},
      {"model.cnn.kernel", "convolution kernel size (odd)"},
      {"model.cnn.pool_kernel", "max-pool window"},
      {"model.cnn.pool_stride", "max-pool stride"},
      {"model.cnn.dense_width", "hidden dense width of the head"},
      {"loss.kind", "ce, mse, mseMargin, loss1, loss2, jacob or adv"},
      {"loss.beta1", "weight of the alignment regularizer (loss1)"},
      {"loss.beta2", "weight of the log noise-to-signal bound (loss2)"},
      {"loss.gamma", "target scale of the alignment regularizer"},
      {"loss.eps_max", "noise bound used by the loss2 regularizer"},
      {"loss.lambda_jac", "Jacobian penalty weight (jacob)"},
      {"loss.all_classes", "regularize every class's effective weight, not only the true class"},
      {"loss.adv_eps", "PGD radius of adversarial training (adv)"},
      {"loss.adv_steps", "PGD steps of adversarial training (adv)"},
      {"train.epochs", "training epochs"},
      {"train.lr", "Adamax learning rate"},
      {"train.batch_size", "mini-batch size"},
      {"train.beta_m", "Adamax first-moment decay"},
      {"train.beta_u", "Adamax infinity-norm decay"},
      {"train.stab", "Adamax denominator stabilizer"},
      {"train.train_eval_rows", "training rows scored for the per-epoch train accuracy (0: all)"},
      {"attacks", "list of attacks; pgd entries: id, method, steps, step_size (null: 2.5*eps/steps), "
                  "random_start, loss (ce|margin|mse), per_class; spsa entries: id, method, iterations, "
                  "delta, lr, pairs, per_class"},
      {"eps_grid", "noise levels, starting at 0 and strictly increasing"},
      {"eval.chunk", "rows per attack work item (fixed for reproducibility)"},
      {"seed", "master seed for initialization, splits, batches and attacks"},
      {"threads", "worker threads (0: NSR_THREADS or all cores)"},
      {"sweep.param", "beta (the loss's own beta), beta1 or beta2"},
      {"sweep.values", "values to try; empty disables the sweep"},
      {"sweep.eps", "PGD radius at which validation accuracy is compared"},
      {"sweep.steps", "PGD steps used by the sweep"},
      {"out_dir", "default output directory"},
  };
  return keys;
}

inline nlohmann::json attack_entry_json(const AttackEntry& a) {
  auto j = a.spec.to_json();
  j.erase("lo");
  j.erase("hi");
  j["per_class"] = a.per_class;
  return j;
}

inline void reject_unknown(const nlohmann::json& given, const nlohmann::json& known, const std::string& where) {
  if (!given.is_object()) throw ArgumentError("config: " + (where.empty() ? "document" : where) + " must be an object");
  for (auto it = given.begin(); it != given.end(); ++it) {
    const std::string path = where.empty() ? it.key() : where + "." + it.key();
    if (!known.contains(it.key())) throw ArgumentError("config: unknown key '" + path + "'");
    const auto& k = known.at(it.key());
    if (k.is_object() && !it.value().is_null()) reject_unknown(it.value(), k, path);
  }
}

template <typename V>
void read(const nlohmann::json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key) || j.at(key).is_null()) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ArgumentError("config: key '" + where + key + "' has the wrong type");
  }
}

inline AttackEntry attack_from_json(const nlohmann::json& j, std::size_t index) {
  const std::string where = "attacks[" + std::to_string(index) + "].";
  if (!j.is_object()) throw ArgumentError("config: " + where + " must be an object");
  std::string method;
  read(j, "method", method, where);
  AttackEntry a;
  std::set<std::string> allowed{"id", "method", "per_class"};
  if (method == "pgd") {
    PgdSpec p;
    allowed.insert({"steps", "step_size", "random_start", "loss"});
    read(j, "steps", p.steps, where);
    if (j.contains("step_size") && !j.at("step_size").is_null()) {
      double s = 0;
      read(j, "step_size", s, where);
      p.step_size = s;
    }
    read(j, "random_start", p.random_start, where);
    std::string loss = "ce";
    read(j, "loss", loss, where);
    const auto l = attack_loss_from_name(loss);
    if (!l) throw ArgumentError("config: " + where + "loss '" + loss + "' is not ce, margin or mse");
    p.loss = *l;
    a.spec.kind = p;
    a.spec.id = "pgd" + std::to_string(p.steps);
  } else if (method == "spsa") {
    SpsaSpec s;
    allowed.insert({"iterations", "delta", "lr", "pairs"});
    read(j, "iterations", s.iterations, where);
    read(j, "delta", s.delta, where);
    read(j, "lr", s.lr, where);
    read(j, "pairs", s.pairs, where);
    a.spec.kind = s;
    a.spec.id = "spsa";
  } else {
    throw ArgumentError("config: " + where + "method must be pgd or spsa");
  }
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw ArgumentError("config: unknown key '" + where + it.key() + "'");
  read(j, "id", a.spec.id, where);
  read(j, "per_class", a.per_class, where);
  if (a.spec.id.empty() || a.spec.id.find('_') != std::string::npos)
    throw ArgumentError("config: " + where + "id must be non-empty and free of '_'");
  return a;
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json attacks = nlohmann::json::array();
  for (const auto& a : c.attacks) attacks.push_back(detail::attack_entry_json(a));
  return {
      {"data",
       {{"train_csv", c.train_csv.string()},
        {"test_csv", c.test_csv.string()},
        {"prepared_dir", c.prepared_dir.string()},
        {"train_fraction", c.train_fraction}}},
      {"model",
       {{"arch", c.arch},
        {"dtype", c.dtype},
        {"mlp", {{"widths", c.mlp_widths}}},
        {"cnn",
         {{"blocks", c.cnn.blocks},
          {"channels", c.cnn.channels},
          {"kernel", c.cnn.kernel},
          {"pool_kernel", c.cnn.pool_kernel},
          {"pool_stride", c.cnn.pool_stride},
          {"dense_width", c.cnn.dense_width}}}}},
      {"loss",
       {{"kind", loss_kind_name(c.train.loss.kind)},
        {"beta1", c.train.loss.beta1},
        {"beta2", c.train.loss.beta2},
        {"gamma", c.train.loss.gamma},
        {"eps_max", c.train.loss.eps_max},
        {"lambda_jac", c.train.loss.lambda_jac},
        {"all_classes", c.train.loss.all_classes},
        {"adv_eps", c.train.loss.adv_eps},
        {"adv_steps", c.train.loss.adv_steps}}},
      {"train",
       {{"epochs", c.train.epochs},
        {"lr", c.train.optimizer.lr},
        {"batch_size", c.train.batch_size},
        {"beta_m", c.train.optimizer.beta_m},
        {"beta_u", c.train.optimizer.beta_u},
        {"stab", c.train.optimizer.stab},
        {"train_eval_rows", c.train.train_eval_rows}}},
      {"attacks", attacks},
      {"eps_grid", c.eps_grid},
      {"eval", {{"chunk", c.eval_chunk}}},
      {"seed", c.train.seed},
      {"threads", c.threads},
      {"sweep", {{"param", c.sweep.param}, {"values", c.sweep.values}, {"eps", c.sweep.eps}, {"steps", c.sweep.steps}}},
      {"out_dir", c.out_dir.string()},
  };
}

inline void RunConfig::validate() const {
  if (arch != "mlp" && arch != "cnn") throw ArgumentError("config: model.arch must be mlp or cnn");
  if (dtype != "f32" && dtype != "f64") throw ArgumentError("config: model.dtype must be f32 or f64");
  if (!(train_fraction > 0 && train_fraction < 1)) throw ArgumentError("config: data.train_fraction must be in (0, 1)");
  if (mlp_widths.size() < 2) throw ArgumentError("config: model.mlp.widths needs at least two entries");
  train.validate();
  if (eps_grid.empty() || eps_grid.front() != 0.0) throw ArgumentError("config: eps_grid must start at 0");
  for (std::size_t i = 1; i < eps_grid.size(); ++i)
    if (!(eps_grid[i] > eps_grid[i - 1])) throw ArgumentError("config: eps_grid must be strictly increasing");
  if (eval_chunk < 1) throw ArgumentError("config: eval.chunk must be positive");
  for (const auto& a : attacks) {
    if (const auto* p = std::get_if<PgdSpec>(&a.spec.kind)) {
      PgdConfig c;
      c.steps = p->steps;
      c.step_size = p->step_size;
      c.validate();
    } else {
      const auto& s = std::get<SpsaSpec>(a.spec.kind);
      SpsaConfig c;
      c.iterations = s.iterations;
      c.delta = s.delta;
      c.lr = s.lr;
      c.pairs = s.pairs;
      c.validate();
    }
  }
  if (sweep.param != "beta" && sweep.param != "beta1" && sweep.param != "beta2")
    throw ArgumentError("config: sweep.param must be beta, beta1 or beta2");
  for (double v : sweep.values)
    if (v < 0) throw ArgumentError("config: sweep.values must be non-negative");
  if (sweep.steps < 1 || sweep.eps < 0) throw ArgumentError("config: sweep.steps >= 1 and sweep.eps >= 0 required");
}

/// Binds a JSON document over the defaults; unknown keys and bad types are argument errors.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  const nlohmann::json known = to_json(c);
  detail::reject_unknown(j, known, "");
  using detail::read;
  if (j.contains("data")) {
    const auto& d = j["data"];
    std::string s;
    if (d.contains("train_csv")) { read(d, "train_csv", s, "data."); c.train_csv = s; }
    if (d.contains("test_csv")) { read(d, "test_csv", s, "data."); c.test_csv = s; }
    if (d.contains("prepared_dir")) { read(d, "prepared_dir", s, "data."); c.prepared_dir = s; }
    read(d, "train_fraction", c.train_fraction, "data.");
  }
  if (j.contains("model")) {
    const auto& m = j["model"];
    read(m, "arch", c.arch, "model.");
    read(m, "dtype", c.dtype, "model.");
    if (m.contains("mlp")) read(m["mlp"], "widths", c.mlp_widths, "model.mlp.");
    if (m.contains("cnn")) {
      const auto& n = m["cnn"];
      read(n, "blocks", c.cnn.blocks, "model.cnn.");
      read(n, "channels", c.cnn.channels, "model.cnn.");
      read(n, "kernel", c.cnn.kernel, "model.cnn.");
      read(n, "pool_kernel", c.cnn.pool_kernel, "model.cnn.");
      read(n, "pool_stride", c.cnn.pool_stride, "model.cnn.");
      read(n, "dense_width", c.cnn.dense_width, "model.cnn.");
    }
  }
  if (j.contains("loss")) {
    const auto& l = j["loss"];
    std::string kind = loss_kind_name(c.train.loss.kind);
    read(l, "kind", kind, "loss.");
    const auto k = loss_kind_from_name(kind);
    if (!k) throw ArgumentError("config: loss.kind '" + kind + "' is not a known loss");
    c.train.loss.kind = *k;
    read(l, "beta1", c.train.loss.beta1, "loss.");
    read(l, "beta2", c.train.loss.beta2, "loss.");
    read(l, "gamma", c.train.loss.gamma, "loss.");
    read(l, "eps_max", c.train.loss.eps_max, "loss.");
    read(l, "lambda_jac", c.train.loss.lambda_jac, "loss.");
    read(l, "all_classes", c.train.loss.all_classes, "loss.");
    read(l, "adv_eps", c.train.loss.adv_eps, "loss.");
    read(l, "adv_steps", c.train.loss.adv_steps, "loss.");
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    read(t, "epochs", c.train.epochs, "train.");
    read(t, "lr", c.train.optimizer.lr, "train.");
    read(t, "batch_size", c.train.batch_size, "train.");
    read(t, "beta_m", c.train.optimizer.beta_m, "train.");
    read(t, "beta_u", c.train.optimizer.beta_u, "train.");
    read(t, "stab", c.train.optimizer.stab, "train.");
    read(t, "train_eval_rows", c.train.train_eval_rows, "train.");
  }
  if (j.contains("attacks")) {
    if (!j["attacks"].is_array()) throw ArgumentError("config: attacks must be a list");
    c.attacks.clear();
    for (std::size_t i = 0; i < j["attacks"].size(); ++i)
      c.attacks.push_back(detail::attack_from_json(j["attacks"][i], i));
  }
  read(j, "eps_grid", c.eps_grid, "");
  if (j.contains("eval")) read(j["eval"], "chunk", c.eval_chunk, "eval.");
  read(j, "seed", c.train.seed, "");
  read(j, "threads", c.threads, "");
  if (j.contains("sweep")) {
    const auto& s = j["sweep"];
    read(s, "param", c.sweep.param, "sweep.");
    read(s, "values", c.sweep.values, "sweep.");
    read(s, "eps", c.sweep.eps, "sweep.");
    read(s, "steps", c.sweep.steps, "sweep.");
  }
  if (j.contains("out_dir")) {
    std::string s;
    read(j, "out_dir", s, "");
    c.out_dir = s;
  }
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ArgumentError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

inline std::string config_digest(const RunConfig& c) { return digest_bytes(to_json(c).dump()); }

/// `--help` text: every key with its default.
inline std::string config_help() {
  const nlohmann::json defaults = to_json(RunConfig{});
  std::ostringstream o;
  o << "Config keys (JSON; defaults shown):\n";
  for (const auto& k : detail::config_keys()) {
    nlohmann::json::json_pointer ptr("/" + [&] {
      std::string p = k.path;
      for (auto& ch : p)
        if (ch == '.') ch = '/';
      return p;
    }());
    o << "  " << k.path << " = " << defaults.at(ptr).dump() << "\n      " << k.help << "\n";
  }
  return o.str();
}

template <typename T>
Model<T> build_model(const RunConfig& c) {
  if (c.arch == "mlp") return build_mlp<T>(c.mlp_widths);
  return build_cnn<T>(c.cnn);
}

}  // namespace nsr
