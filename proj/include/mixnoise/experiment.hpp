#pragma once

#include <toml.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <mutex>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mixnoise/evalstats.hpp"
#include "mixnoise/io.hpp"
#include "mixnoise/robusttrain.hpp"
#include "mixnoise/synthdata.hpp"
#include "mixnoise/transition.hpp"

namespace mixnoise {

namespace fs = std::filesystem;

struct MixtureConfig {
  int c = 3;
  int d = 8;
  int open_populations = 2;
  double separation = 6.0;
  double open_separation = 8.0;
  double sigma = 1.0;
  std::size_t n = 20000;
  double test_fraction = 0.2;
  double val_fraction = 0.1;
  /// Open-set reservoir size as a multiple of n; must cover tau*rho*n.
  double reservoir_multiple = 1.0;

  MixtureSpec spec() const {
    auto s = make_gaussian_mixture(c, d, open_populations, separation, open_separation, sigma);
    s.test_fraction = test_fraction;
    s.val_fraction = val_fraction;
    s.open_fraction_reservoir = reservoir_multiple;
    return s;
  }
};

/// Methods compared per grid cell. Reweighted runs once per k in k_list;
/// forward uses the global (k=1) estimate.
enum class Method { ce, forward, reweighted };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::ce: return "ce";
    case Method::forward: return "forward";
    case Method::reweighted: return "reweighted";
  }
  return "unknown";
}

inline Method method_from_string(const std::string& s) {
  if (s == "ce") return Method::ce;
  if (s == "forward") return Method::forward;
  if (s == "reweighted") return Method::reweighted;
  throw ConfigError("unknown method '" + s + "' (expected ce, forward or reweighted)");
}

/// Artifact subdirectory and report name of one method variant.
inline std::string method_tag(Method m, std::size_t k) {
  if (m == Method::reweighted && k > 1) return "reweighted_k" + std::to_string(k);
  return to_string(m);
}

struct ExperimentConfig {
  MixtureConfig mixture;
  std::vector<double> taus{0.4};
  std::vector<double> rhos{0.5};
  OpenLabelMode open_labels = OpenLabelMode::preserve;
  TrainConfig warmup;
  TrainConfig train;
  AnchorConfig anchors;
  double epsilon = 1e-8;
  /// Robust methods start from the warmup model and fine-tune at
  /// fine_tune_learning_rate.
  bool warm_start = true;
  double fine_tune_learning_rate = 1e-3;
  bool differentiate_weight = false;
  bool revise = false;
  RevisionConfig revision;
  std::vector<std::size_t> k_list{1};
  std::vector<Method> methods{Method::ce, Method::forward, Method::reweighted};
  std::vector<std::uint64_t> seeds{1};
  fs::path output_dir = "runs/experiment";
  /// Resolved TOML text (after overrides).
  std::string canonical;
  /// Resolved TOML without experiment.output_dir: where results land does
  /// not change what they are.
  std::string identity;

  ExperimentConfig() {
    warmup.activation = Activation::sigmoid;
    warmup.learning_rate = 0.2;
    warmup.lr_schedule = TrainConfig::default_schedule(warmup.epochs);
    train.activation = Activation::sigmoid;
    train.lr_schedule = TrainConfig::default_schedule(train.epochs);
  }

  std::string digest() const { return io::hex_digest(identity); }

  void validate() const {
    mixture.spec().validate();
    if (mixture.n < static_cast<std::size_t>(mixture.c) * 10) throw ConfigError("mixture.n must be >= 10*c");
    if (taus.empty() || rhos.empty()) throw ConfigError("noise.tau and noise.rho grids must be nonempty");
    for (double t : taus) NoiseSpec::mixed(t, 0.0).validate(mixture.c);
    for (double r : rhos) NoiseSpec::mixed(0.0, r).validate(mixture.c);
    const double worst_open = *std::max_element(taus.begin(), taus.end()) * *std::max_element(rhos.begin(), rhos.end());
    if (mixture.reservoir_multiple + 1e-12 < worst_open) {
      throw ConfigError("mixture.reservoir_multiple must cover the largest tau*rho of the grid");
    }
    warmup.validate();
    train.validate();
    anchors.validate();
    if (seeds.empty()) throw ConfigError("seeds must be nonempty");
    if (k_list.empty()) throw ConfigError("k_list must be nonempty");
    for (auto k : k_list) {
      if (k < 1) throw ConfigError("k_list entries must be >= 1");
    }
    if (methods.empty()) throw ConfigError("methods must be nonempty");
    if (!(epsilon > 0.0 && epsilon <= 1e-3)) throw ConfigError("robust.epsilon must lie in (0, 1e-3]");
    if (warm_start) {
      if (train.hidden != warmup.hidden || train.activation != warmup.activation) {
        throw ConfigError("robust.warm_start needs train.hidden and train.activation equal to the warmup's");
      }
      if (!(fine_tune_learning_rate > 0.0)) throw ConfigError("robust.fine_tune_learning_rate must be positive");
    }
    if (revise && std::find(methods.begin(), methods.end(), Method::reweighted) == methods.end()) {
      throw ConfigError("robust.revise needs the reweighted method");
    }
  }
};

/// Independent stream seed for (trial seed, stage tag) via std::seed_seq,
/// whose output is fixed by the standard.
inline std::uint64_t derive_seed(std::uint64_t seed, const std::string& tag) {
  const auto h = io::fnv1a(tag);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

// ---- configuration loading ----

namespace detail {

inline std::string key_line(const toml::node& n) {
  const auto& src = n.source();
  return src.begin.line ? " (line " + std::to_string(src.begin.line) + ")" : "";
}

/// Typed access to a TOML document that remembers which keys were read, so
/// unknown (misspelled) keys can be rejected.
class TomlReader {
 public:
  explicit TomlReader(const toml::table& root) : root_(root) {}

  const toml::node* find(const std::string& path) {
    used_.insert(path);
    return root_.at_path(path).node();
  }

  template <typename T>
  void scalar(const std::string& path, T& out) {
    const auto* n = find(path);
    if (!n) return;
    if constexpr (std::is_same_v<T, bool>) {
      if (auto v = n->value<bool>()) {
        out = *v;
        return;
      }
      fail(path, *n, "a boolean");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (auto v = n->value<std::string>()) {
        out = *v;
        return;
      }
      fail(path, *n, "a string");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (n->is_number()) {
        out = *n->value<double>();
        return;
      }
      fail(path, *n, "a number");
    } else {
      if (auto v = n->as_integer()) {
        const auto x = v->get();
        if (x < 0 && std::is_unsigned_v<T>) fail(path, *n, "a nonnegative integer");
        out = static_cast<T>(x);
        return;
      }
      fail(path, *n, "an integer");
    }
  }

  template <typename T>
  void list(const std::string& path, std::vector<T>& out) {
    const auto* n = find(path);
    if (!n) return;
    const auto* arr = n->as_array();
    if (!arr) fail(path, *n, "an array");
    std::vector<T> values;
    for (const auto& item : *arr) {
      T v{};
      if constexpr (std::is_same_v<T, std::string>) {
        auto s = item.value<std::string>();
        if (!s) fail(path, item, "an array of strings");
        v = *s;
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!item.is_number()) fail(path, item, "an array of numbers");
        v = *item.value<double>();
      } else {
        auto i = item.as_integer();
        if (!i || (i->get() < 0 && std::is_unsigned_v<T>)) fail(path, item, "an array of nonnegative integers");
        v = static_cast<T>(i->get());
      }
      values.push_back(v);
    }
    out = std::move(values);
  }

  /// Every leaf key that no reader asked for is a configuration error.
  void reject_unknown() const { walk(root_, ""); }

 private:
  [[noreturn]] static void fail(const std::string& path, const toml::node& n, const char* expected) {
    throw ConfigError("config key '" + path + "'" + key_line(n) + ": expected " + expected);
  }

  void walk(const toml::table& t, const std::string& prefix) const {
    for (const auto& [k, v] : t) {
      const std::string path = prefix.empty() ? std::string(k.str()) : prefix + "." + std::string(k.str());
      if (const auto* sub = v.as_table()) {
        walk(*sub, path);
      } else if (!used_.count(path)) {
        throw ConfigError("unknown config key '" + path + "'" + key_line(v));
      }
    }
  }

  const toml::table& root_;
  std::set<std::string> used_;
};

inline void read_train_config(TomlReader& r, const std::string& section, TrainConfig& t) {
  r.scalar(section + ".epochs", t.epochs);
  r.scalar(section + ".learning_rate", t.learning_rate);
  r.scalar(section + ".batch_size", t.batch_size);
  r.scalar(section + ".weight_decay", t.weight_decay);
  r.scalar(section + ".momentum", t.momentum);
  r.list(section + ".hidden", t.hidden);
  std::string act = to_string(t.activation);
  r.scalar(section + ".activation", act);
  t.activation = activation_from_string(act);
  std::string schedule = "default";
  r.scalar(section + ".schedule", schedule);
  if (schedule == "default") {
    t.lr_schedule = TrainConfig::default_schedule(t.epochs);
  } else if (schedule == "none") {
    t.lr_schedule.clear();
  } else {
    throw ConfigError("config key '" + section + ".schedule': expected \"default\" or \"none\"");
  }
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

}  // namespace detail

/// Applies `section.key=value`. The value is read as a TOML value when it
/// parses as one, otherwise as a bare string.
inline void apply_override(toml::table& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' must look like key=value");
  const auto key = detail::trim(assignment.substr(0, eq));
  const auto value = detail::trim(assignment.substr(eq + 1));
  if (key.empty()) throw ConfigError("override '" + assignment + "' has an empty key");
  toml::table parsed;
  try {
    parsed = toml::parse("v = " + value);
  } catch (const toml::parse_error&) {
    parsed = toml::table{{"v", value}};
  }
  toml::table* cur = &root;
  std::string part;
  std::istringstream parts(key);
  std::vector<std::string> path;
  while (std::getline(parts, part, '.')) path.push_back(part);
  for (std::size_t i = 0; i + 1 < path.size(); ++i) {
    auto* node = cur->get(path[i]);
    if (!node) {
      cur->insert(path[i], toml::table{});
      node = cur->get(path[i]);
    }
    cur = node->as_table();
    if (!cur) throw ConfigError("override key '" + key + "': '" + path[i] + "' is not a table");
  }
  parsed.get("v")->visit([&](const auto& v) { cur->insert_or_assign(path.back(), v); });
}

/// Parses a TOML config (plus overrides) into a validated ExperimentConfig.
inline ExperimentConfig parse_config(const std::string& text, const std::string& source,
                                     const std::vector<std::string>& overrides = {}) {
  toml::table root;
  try {
    root = toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    throw ConfigError("config parse error in " + source + " at line " + std::to_string(e.source().begin.line) +
                      ", column " + std::to_string(e.source().begin.column) + ": " +
                      std::string(e.description()));
  }
  for (const auto& o : overrides) apply_override(root, o);

  ExperimentConfig cfg;
  detail::TomlReader r(root);
  auto& m = cfg.mixture;
  r.scalar("mixture.c", m.c);
  r.scalar("mixture.d", m.d);
  r.scalar("mixture.open_populations", m.open_populations);
  r.scalar("mixture.separation", m.separation);
  r.scalar("mixture.open_separation", m.open_separation);
  r.scalar("mixture.sigma", m.sigma);
  r.scalar("mixture.n", m.n);
  r.scalar("mixture.test_fraction", m.test_fraction);
  r.scalar("mixture.val_fraction", m.val_fraction);
  r.scalar("mixture.reservoir_multiple", m.reservoir_multiple);
  r.list("noise.tau", cfg.taus);
  r.list("noise.rho", cfg.rhos);
  std::string open_labels = "preserve";
  r.scalar("noise.open_labels", open_labels);
  if (open_labels == "preserve") {
    cfg.open_labels = OpenLabelMode::preserve;
  } else if (open_labels == "uniform") {
    cfg.open_labels = OpenLabelMode::uniform;
  } else {
    throw ConfigError("config key 'noise.open_labels': expected \"preserve\" or \"uniform\"");
  }
  detail::read_train_config(r, "warmup", cfg.warmup);
  detail::read_train_config(r, "train", cfg.train);
  r.scalar("anchors.percentile", cfg.anchors.percentile);
  r.scalar("anchors.m", cfg.anchors.m);
  r.scalar("anchors.greedy_matching", cfg.anchors.greedy_matching);
  std::string space = to_string(cfg.anchors.space);
  r.scalar("anchors.space", space);
  cfg.anchors.space = feature_space_from_string(space);
  r.scalar("anchors.kmeans_restarts", cfg.anchors.kmeans_restarts);
  r.scalar("anchors.max_iters", cfg.anchors.max_iters);
  r.scalar("robust.epsilon", cfg.epsilon);
  r.scalar("robust.warm_start", cfg.warm_start);
  r.scalar("robust.fine_tune_learning_rate", cfg.fine_tune_learning_rate);
  r.scalar("robust.differentiate_weight", cfg.differentiate_weight);
  r.scalar("robust.revise", cfg.revise);
  r.scalar("revision.epochs", cfg.revision.epochs);
  r.scalar("revision.learning_rate", cfg.revision.learning_rate);
  r.scalar("revision.slack_learning_rate", cfg.revision.slack_learning_rate);
  r.scalar("revision.batch_size", cfg.revision.batch_size);
  r.list("experiment.k_list", cfg.k_list);
  std::vector<std::string> methods;
  r.list("experiment.methods", methods);
  if (!methods.empty()) {
    cfg.methods.clear();
    for (const auto& s : methods) cfg.methods.push_back(method_from_string(s));
  }
  r.list("experiment.seeds", cfg.seeds);
  std::string out = cfg.output_dir.string();
  r.scalar("experiment.output_dir", out);
  cfg.output_dir = out;
  r.reject_unknown();

  std::ostringstream os;
  os << root;
  cfg.canonical = os.str();
  if (auto* exp = root.get_as<toml::table>("experiment")) exp->erase("output_dir");
  std::ostringstream id;
  id << root;
  cfg.identity = id.str();
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const fs::path& path, const std::vector<std::string>& overrides = {}) {
  if (!fs::exists(path)) throw ConfigError("config file " + path.string() + " does not exist");
  return parse_config(io::read_text(path), path.string(), overrides);
}

// ---- pipeline stages ----

/// One (tau, rho, seed) trial directory and the config that drives it.
struct StageContext {
  const ExperimentConfig* cfg = nullptr;
  std::uint64_t seed = 0;
  double tau = 0.0;
  double rho = 0.0;
  fs::path dir;
};

namespace detail {

class StageTimer {
 public:
  StageTimer() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

inline void record(const StageContext& ctx, const std::string& stage, const StageTimer& timer,
                   const std::vector<fs::path>& outputs) {
  io::ManifestRecord rec;
  rec.stage = stage;
  rec.config_digest = ctx.cfg->digest();
  rec.seed = ctx.seed;
  rec.wall_seconds = timer.seconds();
  for (const auto& p : outputs) {
    rec.outputs.emplace_back(fs::relative(p, ctx.dir).generic_string(), io::file_digest(p));
  }
  io::append_manifest(ctx.dir, rec);
}

inline fs::path transition_file(const fs::path& dir, std::size_t k) {
  return dir / ("transition_k" + std::to_string(k) + ".json");
}

}  // namespace detail

/// Clean mixture sample and open-set reservoir.
inline void stage_synth(const StageContext& ctx) {
  detail::StageTimer timer;
  const auto spec = ctx.cfg->mixture.spec();
  const auto n = ctx.cfg->mixture.n;
  auto clean = generate_mixture(spec, n, derive_seed(ctx.seed, "synth"));
  const auto count = static_cast<std::size_t>(std::ceil(spec.open_fraction_reservoir * static_cast<double>(n)));
  auto reservoir = generate_reservoir(spec, count, derive_seed(ctx.seed, "reservoir"));
  io::write_dataset(ctx.dir / "clean", clean, {{"stage", "synth"}, {"seed", ctx.seed}});
  io::write_feature_csv(ctx.dir / "reservoir.csv", reservoir);
  detail::record(ctx, "synth", timer,
                 {ctx.dir / "clean/features.csv", ctx.dir / "clean/labels.csv", ctx.dir / "clean/meta.json",
                  ctx.dir / "reservoir.csv"});
}

inline NoiseSpec stage_noise_spec(const StageContext& ctx) {
  auto noise = NoiseSpec::mixed(ctx.tau, ctx.rho, derive_seed(ctx.seed, "noise"));
  noise.open_labels = ctx.cfg->open_labels;
  return noise;
}

/// Mixed closed/open-set noise on the clean sample plus its true T*.
inline void stage_corrupt(const StageContext& ctx) {
  detail::StageTimer timer;
  auto clean = io::read_dataset(ctx.dir / "clean", "corrupt");
  io::require(ctx.dir / "reservoir.csv", "corrupt");
  const auto reservoir = io::read_feature_csv(ctx.dir / "reservoir.csv");
  const auto noise = stage_noise_spec(ctx);
  auto noisy = inject_mixed_noise(clean, noise, reservoir);
  io::write_dataset(ctx.dir / "noisy", noisy, {{"stage", "corrupt"}, {"tau", ctx.tau}, {"rho", ctx.rho}});
  io::write_json(ctx.dir / "true_transition.json", io::to_json(true_extended_matrix(noise, clean.c)));
  detail::record(ctx, "corrupt", timer,
                 {ctx.dir / "noisy/features.csv", ctx.dir / "noisy/labels.csv", ctx.dir / "noisy/meta.json",
                  ctx.dir / "true_transition.json"});
}

/// c-output cross-entropy model on the noisy labels.
inline void stage_warmup(const StageContext& ctx) {
  detail::StageTimer timer;
  auto data = io::read_dataset(ctx.dir / "noisy", "warmup");
  auto tc = ctx.cfg->warmup;
  tc.seed = derive_seed(ctx.seed, "warmup");
  auto r = train_warmup(data, tc);
  io::write_model(ctx.dir / "model.json", r.params);
  io::write_history(ctx.dir / "warmup_history.csv", r.history);
  detail::record(ctx, "warmup", timer, {ctx.dir / "model.json", ctx.dir / "warmup_history.csv"});
}

struct EstimationErrors {
  /// Mean over the bundle's matrices of the l1 error to the truth.
  double t_star = 0.0;
  double closed = 0.0;
  double meta = 0.0;
  std::vector<double> per_cluster;
};

inline EstimationErrors estimation_errors(const TransitionBundle& b, const ExtendedTransitionMatrix& truth) {
  EstimationErrors e;
  for (const auto& t : b.matrices) {
    const double full = l1_error(t, truth);
    e.per_cluster.push_back(full);
    e.t_star += full;
    e.closed += l1_error(t.closed_block(), truth.closed_block());
    e.meta += l1_error(Eigen::MatrixXd(t.meta_row()), Eigen::MatrixXd(truth.meta_row()));
  }
  const auto k = static_cast<double>(b.k());
  e.t_star /= k;
  e.closed /= k;
  e.meta /= k;
  return e;
}

/// Fine clustering, anchors and the k-cluster bundle.
inline void stage_estimate(const StageContext& ctx, std::size_t k) {
  detail::StageTimer timer;
  auto data = io::read_dataset(ctx.dir / "noisy", "estimate");
  auto warm = io::read_model(ctx.dir / "model.json", "estimate");
  auto ac = ctx.cfg->anchors;
  ac.seed = derive_seed(ctx.seed, "anchors");
  const auto in = prepare_estimation(warm, data, ac);
  const auto fine = fine_clusters(in, ac);
  const auto bundle = estimate_cluster_dependent(in, fine, k, ac);
  io::write_json(ctx.dir / "clusters.json", io::to_json(fine));
  const auto out = detail::transition_file(ctx.dir, k);
  io::write_json(out, io::to_json(bundle));
  detail::record(ctx, "estimate", timer, {ctx.dir / "clusters.json", out});
}

inline RobustConfig robust_config(const ExperimentConfig& cfg, Method method, std::uint64_t seed) {
  RobustConfig rc;
  rc.objective = method == Method::ce        ? LossKind::ce
                 : method == Method::forward ? LossKind::forward_corrected
                                             : LossKind::reweighted;
  rc.train = cfg.train;
  rc.train.seed = derive_seed(seed, std::string("train:") + to_string(method));
  rc.epsilon = cfg.epsilon;
  rc.differentiate_weight = cfg.differentiate_weight;
  if (method != Method::ce && cfg.warm_start) {
    rc.warm_start = true;
    rc.train.learning_rate = cfg.fine_tune_learning_rate;
  }
  if (method == Method::reweighted && cfg.revise) {
    rc.revise = true;
    rc.revision = cfg.revision;
    rc.revision.seed = derive_seed(seed, "revision");
  }
  return rc;
}

/// Robust (c+1)-output classifier for one method variant.
inline void stage_train(const StageContext& ctx, Method method, std::size_t k) {
  detail::StageTimer timer;
  auto data = io::read_dataset(ctx.dir / "noisy", "train");
  auto warm = io::read_model(ctx.dir / "model.json", "train");
  auto rc = robust_config(*ctx.cfg, method, ctx.seed);
  std::vector<std::size_t> routes(data.size(), 0);
  if (method != Method::ce) {
    const auto file = detail::transition_file(ctx.dir, method == Method::forward ? 1 : k);
    rc.bundle = io::read_bundle(file, "train");
    routes = route_examples(*rc.bundle, warm, data);
  }
  auto r = train_robust(data, rc, routes, &warm);
  const auto out = ctx.dir / method_tag(method, k);
  io::write_model(out / "model.json", r.params);
  io::write_history(out / "history.csv", r.history);
  std::vector<fs::path> files{out / "model.json", out / "history.csv"};
  if (r.revised) {
    io::write_json(out / "transition_revised.json", io::to_json(*r.revised));
    files.push_back(out / "transition_revised.json");
  }
  detail::record(ctx, "train:" + method_tag(method, k), timer, files);
}

/// Test-split predictions and the trial report for one method variant.
inline TrialReport stage_eval(const StageContext& ctx, Method method, std::size_t k) {
  detail::StageTimer timer;
  const auto tag = method_tag(method, k);
  auto data = io::read_dataset(ctx.dir / "noisy", "eval");
  auto model = io::read_model(ctx.dir / tag / "model.json", "eval");
  io::require(ctx.dir / "true_transition.json", "eval");
  const auto truth = io::matrix_record_from_json(io::parse_json_file(ctx.dir / "true_transition.json"));
  const auto test = data.indices(Split::test);
  std::vector<Label> truth_labels;
  for (auto i : test) truth_labels.push_back(data.clean_labels[i]);
  const auto pred = predict_rows(model, data, test);

  TrialReport rep;
  rep.seed = ctx.seed;
  rep.config_digest = ctx.cfg->digest();
  rep.method = tag;
  rep.tau = ctx.tau;
  rep.rho = ctx.rho;
  rep.k = method == Method::reweighted ? k : 1;
  rep.test_accuracy = accuracy(pred, truth_labels);
  const auto tfile = detail::transition_file(ctx.dir, rep.k);
  if (method != Method::ce) {
    const auto e = estimation_errors(io::read_bundle(tfile, "eval"), truth);
    rep.l1_error_global = e.t_star;
    rep.l1_error_closed = e.closed;
    rep.l1_error_meta = e.meta;
    rep.l1_errors_per_cluster = e.per_cluster;
  }
  io::write_predictions(ctx.dir / tag / "predictions.csv", test, pred, truth_labels);
  nlohmann::json j = {{"method", tag},
                      {"k", rep.k},
                      {"seed", rep.seed},
                      {"tau", rep.tau},
                      {"rho", rep.rho},
                      {"test_accuracy", rep.test_accuracy},
                      {"err_Tstar", rep.l1_error_global},
                      {"err_T", rep.l1_error_closed},
                      {"err_Tmeta", rep.l1_error_meta},
                      {"err_per_cluster", rep.l1_errors_per_cluster}};
  io::write_json(ctx.dir / tag / "eval.json", j);
  rep.runtime_seconds = timer.seconds();
  detail::record(ctx, "eval:" + tag, timer, {ctx.dir / tag / "predictions.csv", ctx.dir / tag / "eval.json"});
  return rep;
}

// ---- grid runner ----

/// Method variants run in every trial, in report order.
inline std::vector<std::pair<Method, std::size_t>> method_variants(const ExperimentConfig& cfg) {
  std::vector<std::pair<Method, std::size_t>> out;
  for (auto m : cfg.methods) {
    if (m == Method::reweighted) {
      for (auto k : cfg.k_list) out.emplace_back(m, k);
    } else {
      out.emplace_back(m, 1);
    }
  }
  return out;
}

struct TrialPlan {
  double tau = 0.0;
  double rho = 0.0;
  std::uint64_t seed = 0;
  Method method = Method::ce;
  std::size_t k = 1;
};

/// Every (tau, rho, seed, method variant) the grid produces, in output order.
inline std::vector<TrialPlan> plan_trials(const ExperimentConfig& cfg) {
  std::vector<TrialPlan> out;
  for (double tau : cfg.taus) {
    for (double rho : cfg.rhos) {
      for (auto seed : cfg.seeds) {
        for (auto [m, k] : method_variants(cfg)) out.push_back({tau, rho, seed, m, k});
      }
    }
  }
  return out;
}

struct TrialOutcome {
  TrialPlan plan;
  bool ok = false;
  std::string error;
  TrialReport report;
};

struct ExperimentResult {
  std::vector<TrialOutcome> trials;
  std::size_t incomplete_cells = 0;
  bool complete() const { return incomplete_cells == 0; }
};

/// Worker cap from MIXNOISE_THREADS (default 1).
inline std::size_t thread_cap() {
  const char* v = std::getenv("MIXNOISE_THREADS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) throw ConfigError("MIXNOISE_THREADS must be a positive integer");
  return static_cast<std::size_t>(n);
}

inline std::string grid_label(double x) {
  std::ostringstream os;
  os << x;
  return os.str();
}

inline fs::path trial_dir(const ExperimentConfig& cfg, double tau, double rho, std::uint64_t seed) {
  return cfg.output_dir / "trials" /
         ("tau" + grid_label(tau) + "_rho" + grid_label(rho) + "_seed" + std::to_string(seed));
}

namespace detail {

/// Full pipeline for one (tau, rho, seed); every variant's outcome lands in
/// its own slot of `slots`.
inline void run_unit(const ExperimentConfig& cfg, double tau, double rho, std::uint64_t seed,
                     const std::vector<std::pair<Method, std::size_t>>& variants, TrialOutcome* slots) {
  StageContext ctx{&cfg, seed, tau, rho, trial_dir(cfg, tau, rho, seed)};
  try {
    stage_synth(ctx);
    stage_corrupt(ctx);
    stage_warmup(ctx);
  } catch (const std::exception& e) {
    for (std::size_t v = 0; v < variants.size(); ++v) slots[v].error = e.what();
    return;
  }
  // A failed estimate only fails the variants that consume it.
  std::map<std::size_t, std::string> estimate_errors;
  for (auto [m, k] : variants) {
    if (m == Method::ce) continue;
    const auto kk = m == Method::forward ? 1 : k;
    if (estimate_errors.count(kk)) continue;
    try {
      stage_estimate(ctx, kk);
      estimate_errors[kk] = "";
    } catch (const std::exception& e) {
      estimate_errors[kk] = e.what();
    }
  }
  for (std::size_t v = 0; v < variants.size(); ++v) {
    const auto [m, k] = variants[v];
    if (m != Method::ce) {
      const auto& err = estimate_errors[m == Method::forward ? 1 : k];
      if (!err.empty()) {
        slots[v].error = err;
        continue;
      }
    }
    try {
      stage_train(ctx, m, k);
      slots[v].report = stage_eval(ctx, m, k);
      slots[v].ok = true;
    } catch (const std::exception& e) {
      slots[v].error = e.what();
    }
  }
}

inline std::string csv_escape(std::string s) {
  std::replace(s.begin(), s.end(), ',', ';');
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

}  // namespace detail

/// Per-cell (method, tau, rho) accuracy summary.
struct CellSummary {
  std::string method;
  double tau = 0.0;
  double rho = 0.0;
  std::size_t k = 1;
  std::size_t planned = 0;
  std::vector<double> accuracies;
  bool complete() const { return accuracies.size() == planned; }
};

inline std::vector<CellSummary> summarize_cells(const std::vector<TrialOutcome>& trials) {
  std::vector<CellSummary> cells;
  std::map<std::tuple<double, double, std::string>, std::size_t> index;
  for (const auto& t : trials) {
    const auto tag = method_tag(t.plan.method, t.plan.k);
    const auto key = std::make_tuple(t.plan.tau, t.plan.rho, tag);
    auto it = index.find(key);
    if (it == index.end()) {
      it = index.emplace(key, cells.size()).first;
      cells.push_back({tag, t.plan.tau, t.plan.rho, t.plan.method == Method::reweighted ? t.plan.k : 1, 0, {}});
    }
    auto& cell = cells[it->second];
    ++cell.planned;
    if (t.ok) cell.accuracies.push_back(t.report.test_accuracy);
  }
  return cells;
}

/// Each robust variant against CE in the same cell, for cells where both
/// have at least two completed seeds.
inline std::string ttest_csv(const std::vector<CellSummary>& cells) {
  using io::fmt;
  std::string out = "baseline,method,tau,rho,t,df,p,p_formatted\n";
  for (const auto& base : cells) {
    if (base.method != "ce" || base.accuracies.size() < 2) continue;
    for (const auto& c : cells) {
      if (c.method == "ce" || c.tau != base.tau || c.rho != base.rho || c.accuracies.size() < 2) continue;
      const auto r = ttest_independent(base.accuracies, c.accuracies);
      out += "ce," + c.method + "," + fmt(c.tau) + "," + fmt(c.rho) + "," + fmt(r.t) + "," + fmt(r.df) + "," +
             fmt(r.p) + "," + format_pvalue(r.p) + "\n";
    }
  }
  return out;
}

/// Inverse of method_tag.
inline std::pair<Method, std::size_t> parse_method_tag(const std::string& tag) {
  const std::string prefix = "reweighted_k";
  if (tag.rfind(prefix, 0) == 0) {
    return {Method::reweighted, static_cast<std::size_t>(io::parse_int(tag.substr(prefix.size()), "method tag"))};
  }
  return {method_from_string(tag), 1};
}

/// Reads trials.csv back into outcomes (accuracy and errors only).
inline std::vector<TrialOutcome> read_trials_csv(const fs::path& path) {
  io::require(path, "ttest");
  std::vector<TrialOutcome> out;
  for (const auto& row : io::read_csv_rows(path)) {
    if (row.size() < 10) throw ShapeError("trials.csv rows need at least 10 columns");
    TrialOutcome t;
    std::tie(t.plan.method, t.plan.k) = parse_method_tag(row[0]);
    t.plan.tau = io::parse_double(row[1], "trials.csv");
    t.plan.rho = io::parse_double(row[2], "trials.csv");
    t.plan.seed = static_cast<std::uint64_t>(io::parse_int(row[4], "trials.csv"));
    t.ok = row[5] == "ok";
    if (t.ok) {
      t.report.test_accuracy = io::parse_double(row[6], "trials.csv");
      t.report.l1_error_global = io::parse_double(row[7], "trials.csv");
      t.report.l1_error_closed = io::parse_double(row[8], "trials.csv");
      t.report.l1_error_meta = io::parse_double(row[9], "trials.csv");
    }
    if (row.size() > 10) t.error = row[10];
    out.push_back(std::move(t));
  }
  return out;
}

/// Writes trials.csv, summary.csv, summary.json, estimation_error.csv and
/// ttest.csv into the output directory.
inline void write_experiment_outputs(const ExperimentConfig& cfg, const std::vector<TrialOutcome>& trials) {
  using io::fmt;
  const auto& out = cfg.output_dir;
  std::string tcsv = "method,tau,rho,k,seed,status,test_accuracy,err_Tstar,err_T,err_Tmeta,error\n";
  std::string ecsv = "tau,rho,k,seed,err_T,err_Tmeta,err_Tstar\n";
  std::set<std::tuple<double, double, std::size_t, std::uint64_t>> error_rows;
  for (const auto& t : trials) {
    const auto& r = t.report;
    tcsv += method_tag(t.plan.method, t.plan.k) + "," + fmt(t.plan.tau) + "," + fmt(t.plan.rho) + "," +
            std::to_string(t.plan.method == Method::reweighted ? t.plan.k : 1) + "," + std::to_string(t.plan.seed) +
            "," + (t.ok ? "ok" : "failed") + "," + (t.ok ? fmt(r.test_accuracy) : "") + "," +
            (t.ok ? fmt(r.l1_error_global) : "") + "," + (t.ok ? fmt(r.l1_error_closed) : "") + "," +
            (t.ok ? fmt(r.l1_error_meta) : "") + "," + detail::csv_escape(t.error) + "\n";
    // One estimation row per (tau, rho, k, seed), taken from the reweighted
    // variant that owns that k (forward shares k=1).
    if (t.ok && t.plan.method != Method::ce) {
      const auto key = std::make_tuple(t.plan.tau, t.plan.rho, r.k, t.plan.seed);
      if (error_rows.insert(key).second) {
        ecsv += fmt(t.plan.tau) + "," + fmt(t.plan.rho) + "," + std::to_string(r.k) + "," +
                std::to_string(t.plan.seed) + "," + fmt(r.l1_error_closed) + "," + fmt(r.l1_error_meta) + "," +
                fmt(r.l1_error_global) + "\n";
      }
    }
  }
  io::write_text(out / "trials.csv", tcsv);
  io::write_text(out / "estimation_error.csv", ecsv);

  const auto cells = summarize_cells(trials);
  std::string scsv = "method,tau,rho,k,trials,completed,accuracy_mean,accuracy_std,formatted,complete\n";
  nlohmann::json sjson = nlohmann::json::array();
  for (const auto& c : cells) {
    std::string mean, std, formatted;
    nlohmann::json row = {{"method", c.method}, {"tau", c.tau},          {"rho", c.rho},
                          {"k", c.k},           {"trials", c.planned}, {"completed", c.accuracies.size()},
                          {"complete", c.complete()}};
    if (!c.accuracies.empty()) {
      const auto s = summarize(c.accuracies);
      mean = fmt(s.mean);
      std = fmt(s.std);
      formatted = format_mean_std(s);
      row["accuracy_mean"] = s.mean;
      row["accuracy_std"] = s.std;
      row["formatted"] = formatted;
      row["single_trial"] = s.single;
    }
    scsv += c.method + "," + fmt(c.tau) + "," + fmt(c.rho) + "," + std::to_string(c.k) + "," +
            std::to_string(c.planned) + "," + std::to_string(c.accuracies.size()) + "," + mean + "," + std + "," +
            formatted + "," + (c.complete() ? "true" : "false") + "\n";
    sjson.push_back(row);
  }
  io::write_text(out / "summary.csv", scsv);
  io::write_json(out / "summary.json", {{"config_digest", cfg.digest()}, {"cells", sjson}});

  io::write_text(out / "ttest.csv", ttest_csv(cells));
}

/// Runs the whole grid. Trials for distinct (tau, rho, seed) run on up to
/// MIXNOISE_THREADS workers; each owns its directory and result slots, so
/// outputs do not depend on the thread count.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto threads = thread_cap();
  detail::StageTimer timer;
  fs::create_directories(cfg.output_dir);
  io::write_text(cfg.output_dir / "config.toml", cfg.canonical);

  const auto variants = method_variants(cfg);
  ExperimentResult result;
  result.trials.resize(plan_trials(cfg).size());
  {
    const auto plans = plan_trials(cfg);
    for (std::size_t i = 0; i < plans.size(); ++i) result.trials[i].plan = plans[i];
  }
  struct Unit {
    double tau, rho;
    std::uint64_t seed;
    std::size_t first;
  };
  std::vector<Unit> units;
  for (std::size_t i = 0; i < result.trials.size(); i += variants.size()) {
    const auto& p = result.trials[i].plan;
    units.push_back({p.tau, p.rho, p.seed, i});
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t u = next++; u < units.size(); u = next++) {
      detail::run_unit(cfg, units[u].tau, units[u].rho, units[u].seed, variants, &result.trials[units[u].first]);
    }
  };
  const auto n_workers = std::min(threads, units.size());
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_workers; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  write_experiment_outputs(cfg, result.trials);
  for (const auto& c : summarize_cells(result.trials)) {
    if (!c.complete()) ++result.incomplete_cells;
  }
  io::ManifestRecord rec;
  rec.stage = "experiment";
  rec.config_digest = cfg.digest();
  rec.seed = cfg.seeds.front();
  rec.wall_seconds = timer.seconds();
  for (const char* f : {"config.toml", "trials.csv", "summary.csv", "summary.json", "estimation_error.csv",
                        "ttest.csv"}) {
    rec.outputs.emplace_back(f, io::file_digest(cfg.output_dir / f));
  }
  io::append_manifest(cfg.output_dir, rec);
  return result;
}

}  // namespace mixnoise
