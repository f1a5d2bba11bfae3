#pragma once

// Experiment drivers: configuration, training loop, evaluation records and
// the artifacts written for each run.

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"

#include "bnn.hpp"
#include "data.hpp"
#include "dgp.hpp"
#include "hmc.hpp"
#include "metrics.hpp"

namespace gibayes {

using Json = nlohmann::ordered_json;

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct ExperimentConfig {
  std::string experiment = "toy";  // toy | linear | uci | inducing_sweep | compositional
  std::string method = "gi";       // gi | fac | li | rand | fac->gi | rand->gi | hmc (toy only)
  std::string prior = "neal";
  std::vector<std::size_t> hidden{50, 50};
  bool bias = true;
  std::size_t inducing = 100;
  std::size_t epochs = 5000;
  std::size_t batch_size = 0;  // 0: full batch
  double lr = 1e-2;
  std::uint64_t seed = 0;
  std::size_t train_samples = 10;
  std::size_t test_samples = 100;
  bool tempering = false;
  std::size_t eval_every = 0;  // epochs between evaluation records; 0: final only
  std::string dataset;         // CSV path (uci)
  std::size_t split = 0;
  double test_fraction = 0.1;
  double noise_log_var = -3.0;  // initial value when the noise is learned
  bool per_output_precision = false;
  std::string kernel = "sqexp";  // compositional
  std::size_t variance_inputs = 1000;
  std::size_t variance_samples = 100;
  HmcConfig hmc;

  /// Run identifier, also used as the checkpoint file name.
  std::string id() const {
    std::string m = method;
    for (auto p = m.find("->"); p != std::string::npos; p = m.find("->")) m.replace(p, 2, "-to-");
    std::string s = experiment + "-" + m;
    if (experiment == "linear") {
      s += "-w" + std::to_string(hidden.empty() ? 0 : hidden.front()) + "-d" + std::to_string(hidden.size() + 1);
    }
    if (experiment == "inducing_sweep") s += "-m" + std::to_string(inducing);
    if (experiment == "uci") s += "-split" + std::to_string(split);
    return s + "-s" + std::to_string(seed);
  }
};

inline Json to_json(const ExperimentConfig& c) {
  return Json{{"experiment", c.experiment},
              {"method", c.method},
              {"prior", c.prior},
              {"hidden", c.hidden},
              {"bias", c.bias},
              {"inducing", c.inducing},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"lr", c.lr},
              {"seed", c.seed},
              {"train_samples", c.train_samples},
              {"test_samples", c.test_samples},
              {"tempering", c.tempering},
              {"eval_every", c.eval_every},
              {"dataset", c.dataset},
              {"split", c.split},
              {"test_fraction", c.test_fraction},
              {"noise_log_var", c.noise_log_var},
              {"per_output_precision", c.per_output_precision},
              {"kernel", c.kernel},
              {"variance_inputs", c.variance_inputs},
              {"variance_samples", c.variance_samples},
              {"hmc",
               {{"leapfrog", c.hmc.leapfrog},
                {"burn_step", c.hmc.burn_step},
                {"step", c.hmc.step},
                {"burn_in", c.hmc.burn_in},
                {"samples", c.hmc.samples},
                {"thin", c.hmc.thin}}}};
}

namespace detail {

template <class T>
void read_field(const Json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("config field '") + key + "': " + e.what());
  }
}

}  // namespace detail

/// Fields absent from the object keep their defaults; unknown fields are an error.
inline ExperimentConfig config_from_json(const Json& j, ExperimentConfig c = {}) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  const Json known = to_json(c);
  for (const auto& [k, v] : j.items())
    if (!known.contains(k)) throw ConfigError("unknown config field '" + k + "'");
  detail::read_field(j, "experiment", c.experiment);
  detail::read_field(j, "method", c.method);
  detail::read_field(j, "prior", c.prior);
  detail::read_field(j, "hidden", c.hidden);
  detail::read_field(j, "bias", c.bias);
  detail::read_field(j, "inducing", c.inducing);
  detail::read_field(j, "epochs", c.epochs);
  detail::read_field(j, "batch_size", c.batch_size);
  detail::read_field(j, "lr", c.lr);
  detail::read_field(j, "seed", c.seed);
  detail::read_field(j, "train_samples", c.train_samples);
  detail::read_field(j, "test_samples", c.test_samples);
  detail::read_field(j, "tempering", c.tempering);
  detail::read_field(j, "eval_every", c.eval_every);
  detail::read_field(j, "dataset", c.dataset);
  detail::read_field(j, "split", c.split);
  detail::read_field(j, "test_fraction", c.test_fraction);
  detail::read_field(j, "noise_log_var", c.noise_log_var);
  detail::read_field(j, "per_output_precision", c.per_output_precision);
  detail::read_field(j, "kernel", c.kernel);
  detail::read_field(j, "variance_inputs", c.variance_inputs);
  detail::read_field(j, "variance_samples", c.variance_samples);
  if (j.contains("hmc")) {
    const Json& h = j.at("hmc");
    if (!h.is_object()) throw ConfigError("config field 'hmc' must be an object");
    detail::read_field(h, "leapfrog", c.hmc.leapfrog);
    detail::read_field(h, "burn_step", c.hmc.burn_step);
    detail::read_field(h, "step", c.hmc.step);
    detail::read_field(h, "burn_in", c.hmc.burn_in);
    detail::read_field(h, "samples", c.hmc.samples);
    detail::read_field(h, "thin", c.hmc.thin);
  }
  return c;
}

/// Per-layer families for a method name: a single family for every layer, or
/// "a->b" for family a in every layer but the last and b in the last.
inline std::vector<Family> method_families(const std::string& method, std::size_t layers) {
  if (layers == 0) throw ConfigError("network needs at least one layer");
  const auto arrow = method.find("->");
  if (arrow == std::string::npos) return std::vector<Family>(layers, parse_family(method));
  std::vector<Family> f(layers, parse_family(method.substr(0, arrow)));
  f.back() = parse_family(method.substr(arrow + 2));
  return f;
}

inline void validate(const ExperimentConfig& c) {
  static const std::vector<std::string> kinds{"toy", "linear", "uci", "inducing_sweep", "compositional"};
  if (std::find(kinds.begin(), kinds.end(), c.experiment) == kinds.end())
    throw ConfigError("unknown experiment '" + c.experiment + "'");
  if (c.method == "hmc") {
    if (c.experiment != "toy") throw ConfigError("hmc runs only on the toy experiment");
  } else {
    method_families(c.method, c.hidden.size() + 1);
  }
  parse_prior(c.prior);
  if (c.experiment == "compositional") {
    parse_kernel(c.kernel);
    if (c.method != "gi" && c.method != "li") throw ConfigError("compositional runs take method gi or li");
  }
  if (c.epochs == 0) throw ConfigError("epochs must be positive");
  if (!(c.lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (c.train_samples == 0 || c.test_samples == 0) throw ConfigError("sample counts must be positive");
  if (c.inducing == 0) throw ConfigError("inducing point count must be positive");
  for (std::size_t w : c.hidden)
    if (w == 0) throw ConfigError("hidden widths must be positive");
  if (c.experiment == "uci" && c.dataset.empty()) throw ConfigError("uci runs need a dataset path");
  if (!(c.test_fraction > 0.0 && c.test_fraction < 1.0)) throw ConfigError("test fraction must be in (0, 1)");
  if (c.variance_samples < 2) throw ConfigError("variance_samples must be at least 2");
}

/// One evaluation of a run. Undefined metrics are NaN and serialise as null.
struct MetricsRecord {
  std::string run, experiment, method;
  std::uint64_t seed = 0;
  std::size_t split = 0;
  std::size_t epoch = 0;
  std::size_t datapoints = 0;
  double kl_scale = 1.0;
  double elbo = kNaN;
  double elbo_per_datapoint = kNaN;
  double elbo_se = kNaN;  // standard error of elbo_per_datapoint
  double train_ll = kNaN;  // per datapoint, normalised units
  double test_ll = kNaN;   // per datapoint, original units
  double rmse = kNaN;      // original units
  double ece = kNaN;
  double entropy_ratio = kNaN;
  double evidence = kNaN;  // linear: log evidence of the generating model
  double gap_std = kNaN;   // toy: mean predictive std in the input gap, normalised units
  double accept = kNaN;    // hmc acceptance rate
  bool low_acceptance = false;
  std::vector<double> function_variance;
  double wall_time = 0.0;
  std::string status = "ok";
  std::string error;
};

inline Json to_json(const MetricsRecord& r) {
  auto num = [](double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); };
  Json fv = Json::array();
  for (double v : r.function_variance) fv.push_back(num(v));
  Json j{{"run", r.run},
         {"experiment", r.experiment},
         {"method", r.method},
         {"seed", r.seed},
         {"split", r.split},
         {"epoch", r.epoch},
         {"datapoints", r.datapoints},
         {"kl_scale", num(r.kl_scale)},
         {"elbo", num(r.elbo)},
         {"elbo_per_datapoint", num(r.elbo_per_datapoint)},
         {"elbo_se", num(r.elbo_se)},
         {"train_ll", num(r.train_ll)},
         {"test_ll", num(r.test_ll)},
         {"rmse", num(r.rmse)},
         {"ece", num(r.ece)},
         {"entropy_ratio", num(r.entropy_ratio)},
         {"evidence", num(r.evidence)},
         {"gap_std", num(r.gap_std)},
         {"accept", num(r.accept)},
         {"low_acceptance", r.low_acceptance},
         {"function_variance", fv},
         {"wall_time", r.wall_time},
         {"status", r.status}};
  if (!r.error.empty()) j["error"] = r.error;
  return j;
}

/// Columns of the CSV metrics format, in order.
inline const std::vector<std::string>& metric_columns() {
  static const std::vector<std::string> cols{
      "run",     "experiment", "method", "seed",          "split",    "epoch",   "datapoints", "kl_scale",
      "elbo",    "elbo_per_datapoint", "elbo_se", "train_ll", "test_ll", "rmse",    "ece",        "entropy_ratio",
      "evidence", "gap_std",   "accept", "low_acceptance", "function_variance", "wall_time", "status", "error"};
  return cols;
}

/// Shortest round-trip decimal; non-finite values become empty fields.
inline std::string format_double(double v) {
  if (!std::isfinite(v)) return "";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

inline std::string to_csv_row(const MetricsRecord& r) {
  std::string fv;
  for (std::size_t i = 0; i < r.function_variance.size(); ++i) fv += (i ? ";" : "") + format_double(r.function_variance[i]);
  const std::vector<std::string> cells{csv_escape(r.run),
                                       r.experiment,
                                       csv_escape(r.method),
                                       std::to_string(r.seed),
                                       std::to_string(r.split),
                                       std::to_string(r.epoch),
                                       std::to_string(r.datapoints),
                                       format_double(r.kl_scale),
                                       format_double(r.elbo),
                                       format_double(r.elbo_per_datapoint),
                                       format_double(r.elbo_se),
                                       format_double(r.train_ll),
                                       format_double(r.test_ll),
                                       format_double(r.rmse),
                                       format_double(r.ece),
                                       format_double(r.entropy_ratio),
                                       format_double(r.evidence),
                                       format_double(r.gap_std),
                                       format_double(r.accept),
                                       r.low_acceptance ? "true" : "false",
                                       fv,
                                       format_double(r.wall_time),
                                       r.status,
                                       csv_escape(r.error)};
  std::string line;
  for (std::size_t i = 0; i < cells.size(); ++i) line += (i ? "," : "") + cells[i];
  return line;
}

/// Predictive moments at one plotting location, original units.
struct GridPoint {
  double x = 0.0, mean = 0.0, std = 0.0;
};

struct RunOutput {
  ExperimentConfig config;
  std::vector<MetricsRecord> records;  // the last one is the final evaluation
  std::vector<GridPoint> grid;
  Json checkpoint;
};

using RecordSink = std::function<void(const MetricsRecord&)>;

inline Json checkpoint_json(const ExperimentConfig& cfg, const std::vector<NamedParam>& params) {
  Json p = Json::array();
  for (const auto& np : params) {
    const Tensor& v = np.var.value();
    p.push_back({{"name", np.name}, {"shape", v.shape()}, {"data", v.storage()}});
  }
  return Json{{"config", to_json(cfg)}, {"parameters", p}};
}

/// Restores parameter values by name; every parameter must be present with a
/// matching shape.
inline void load_checkpoint(const Json& ck, const std::vector<NamedParam>& params) {
  if (!ck.contains("parameters") || !ck.at("parameters").is_array()) throw ConfigError("checkpoint has no parameters");
  for (const auto& np : params) {
    const Json* found = nullptr;
    for (const auto& e : ck.at("parameters"))
      if (e.at("name") == np.name) found = &e;
    if (!found) throw ConfigError("checkpoint is missing parameter '" + np.name + "'");
    const Shape s = found->at("shape").get<Shape>();
    auto data = found->at("data").get<std::vector<double>>();
    if (s != np.var.shape() || data.size() != shape_size(s))
      throw ShapeError("checkpoint shape mismatch for '" + np.name + "'");
    Var v = np.var;
    v.set_value(Tensor(s, std::move(data)));
  }
}

namespace detail {

using Objective = std::function<Var(const Tensor&, const Tensor&, std::size_t, NoiseSource&, double, std::size_t)>;

inline Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& idx, std::size_t from, std::size_t count) {
  const std::size_t c = t.cols();
  Tensor out({count, c});
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t j = 0; j < c; ++j) out(i, j) = t(idx[from + i], j);
  return out;
}

/// Adam on the negative objective. Calls `on_epoch(epoch)` after each epoch
/// (1-based). Gives up with NumericalError after 100 consecutive non-finite
/// gradients.
inline void train(const std::vector<NamedParam>& params, const Tensor& x, const Tensor& y, const ExperimentConfig& cfg,
                  const Objective& objective, const std::function<void(std::size_t)>& on_epoch) {
  Adam opt(params, {cfg.lr});
  RandomNoise noise(split_seed(cfg.seed, 2));
  Rng order(split_seed(cfg.seed, 4));
  const std::size_t n = x.rows();
  const std::size_t batch = cfg.batch_size == 0 || cfg.batch_size >= n ? n : cfg.batch_size;
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  const TemperSchedule temper{cfg.tempering, 10, 0.1};
  std::size_t bad = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double kl = kl_scale(epoch, temper);
    if (batch < n) order.shuffle(idx.begin(), idx.end());
    for (std::size_t from = 0; from < n; from += batch) {
      const std::size_t count = std::min(batch, n - from);
      Var e = batch == n ? objective(x, y, cfg.train_samples, noise, kl, 0)
                         : objective(gather_rows(x, idx, from, count), gather_rows(y, idx, from, count),
                                     cfg.train_samples, noise, kl, n);
      if (!std::isfinite(e.item())) {
        if (++bad >= 100) throw NumericalError("training diverged: objective not finite for 100 consecutive steps");
        continue;
      }
      backward(-e);
      if (opt.step())
        bad = 0;
      else if (++bad >= 100)
        throw NumericalError("training diverged: gradients not finite for 100 consecutive steps");
    }
    on_epoch(epoch + 1);
  }
}

/// Mean and standard error of single-sample ELBO evaluations, per datapoint.
inline std::pair<double, double> elbo_estimate(const Objective& objective, const Tensor& x, const Tensor& y,
                                               std::size_t samples, NoiseSource& noise) {
  std::vector<double> v;
  for (std::size_t s = 0; s < samples; ++s) v.push_back(objective(x, y, 1, noise, 1.0, 0).item());
  const double n = static_cast<double>(samples);
  double mean = 0.0;
  for (double e : v) mean += e / n;
  double var = 0.0;
  for (double e : v) var += (e - mean) * (e - mean);
  var = samples > 1 ? var / (n - 1.0) : 0.0;
  const double p = static_cast<double>(x.rows());
  return {mean / p, std::sqrt(var / n) / p};
}

inline double mean_of(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v;
  return s / static_cast<double>(t.size());
}

inline double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline MetricsRecord blank_record(const ExperimentConfig& c) {
  MetricsRecord r;
  r.run = c.id();
  r.experiment = c.experiment;
  r.method = c.method;
  r.seed = c.seed;
  r.split = c.split;
  return r;
}

inline Tensor toy_grid_inputs(const ToyData& d, std::vector<double>& raw) {
  const std::size_t g = 121;
  raw.clear();
  Tensor xr({g, 1});
  for (std::size_t i = 0; i < g; ++i) {
    xr[i] = -6.0 + 12.0 * static_cast<double>(i) / static_cast<double>(g - 1);
    raw.push_back(xr[i]);
  }
  return d.x_norm.apply(xr);
}

// Grid moments in original units, and the mean normalised std inside the gap.
inline double fill_toy_grid(const ToyData& d, const std::vector<double>& raw, const Tensor& mean, const Tensor& var,
                            std::vector<GridPoint>& grid) {
  grid.clear();
  double gap = 0.0;
  std::size_t in_gap = 0;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const double sd = std::sqrt(var[i]);
    grid.push_back({raw[i], mean[i] * d.y_norm.std[0] + d.y_norm.mean[0], sd * d.y_norm.std[0]});
    if (std::abs(raw[i]) < 2.0) {
      gap += sd;
      ++in_gap;
    }
  }
  return gap / static_cast<double>(in_gap);
}

inline Bnn build_bnn(const ExperimentConfig& c, std::size_t in, const Tensor& x_init, const Tensor& y_init,
                     bool relu, bool learn_noise, double noise_log_var) {
  BnnConfig b;
  b.widths.push_back(in);
  b.widths.insert(b.widths.end(), c.hidden.begin(), c.hidden.end());
  b.widths.push_back(y_init.cols());
  b.families = method_families(c.method, c.hidden.size() + 1);
  b.prior = parse_prior(c.prior);
  b.inducing = c.inducing;
  b.bias = c.bias;
  b.relu = relu;
  b.per_output_precision = c.per_output_precision;
  b.local_reparam = std::all_of(b.families.begin(), b.families.end(), [](Family f) { return f == Family::Factorised; });
  b.learn_noise = learn_noise;
  b.noise_log_var = noise_log_var;
  Rng rng(split_seed(c.seed, 1));
  return make_bnn(b, x_init, y_init, rng);
}

inline Objective bnn_objective(const Bnn& m) {
  return [&m](const Tensor& x, const Tensor& y, std::size_t s, NoiseSource& n, double kl, std::size_t ds) {
    return elbo(m, x, y, s, n, kl, ds);
  };
}

inline Objective dgp_objective(const Dgp& m) {
  return [&m](const Tensor& x, const Tensor& y, std::size_t s, NoiseSource& n, double kl, std::size_t ds) {
    return dgp_elbo(m, x, y, s, n, kl, ds);
  };
}

inline void emit(RunOutput& out, MetricsRecord r, const RecordSink& sink) {
  out.records.push_back(r);
  if (sink) sink(out.records.back());
}

inline bool due(const ExperimentConfig& c, std::size_t epoch) {
  return epoch == c.epochs || (c.eval_every != 0 && epoch % c.eval_every == 0);
}

inline RunOutput run_toy_hmc(const ExperimentConfig& c, const RecordSink& sink) {
  const auto t0 = std::chrono::steady_clock::now();
  const ToyData d = gen_toy(split_seed(c.seed, 0));
  Mlp net{{1}, c.bias};
  net.widths.insert(net.widths.end(), c.hidden.begin(), c.hidden.end());
  net.widths.push_back(1);
  const LogJoint f = mlp_log_joint(net, d.x.mat(), d.y.mat(), d.noise_var);
  const HmcResult h = hmc_sample(f, net.num_params(), c.hmc, split_seed(c.seed, 5));
  RunOutput out;
  out.config = c;
  std::vector<double> raw;
  const Eigen::MatrixXd grid_x = toy_grid_inputs(d, raw).mat();
  const PredictiveMoments pm =
      hmc_predictive(h.samples, [&](const Eigen::VectorXd& s) { return Eigen::VectorXd(net.forward(s, grid_x)); },
                     d.noise_var);
  Tensor mean({raw.size(), 1}), var({raw.size(), 1});
  for (std::size_t i = 0; i < raw.size(); ++i) {
    mean[i] = pm.mean[static_cast<Eigen::Index>(i)];
    var[i] = pm.std[static_cast<Eigen::Index>(i)] * pm.std[static_cast<Eigen::Index>(i)];
  }
  MetricsRecord r = blank_record(c);
  r.datapoints = d.x.rows();
  r.gap_std = fill_toy_grid(d, raw, mean, var, out.grid);
  r.accept = h.accept;
  r.low_acceptance = h.low_acceptance;
  // predictive log density of the training targets under the chain
  const Eigen::MatrixXd xm = d.x.mat();
  std::vector<double> lse(d.x.rows(), -std::numeric_limits<double>::infinity());
  for (const auto& s : h.samples) {
    const Eigen::MatrixXd fx = net.forward(s, xm);
    for (std::size_t i = 0; i < d.x.rows(); ++i) {
      const double l = -0.5 * (std::pow(d.y[i] - fx(static_cast<Eigen::Index>(i), 0), 2) / d.noise_var +
                               std::log(d.noise_var) + kLog2Pi);
      const double m = std::max(lse[i], l);
      lse[i] = m + std::log(std::exp(lse[i] - m) + std::exp(l - m));
    }
  }
  r.train_ll = 0.0;
  for (double v : lse) r.train_ll += (v - std::log(static_cast<double>(h.samples.size()))) / static_cast<double>(lse.size());
  r.wall_time = elapsed(t0);
  emit(out, r, sink);
  Json last = Json::array();
  for (Eigen::Index i = 0; i < h.samples.back().size(); ++i) last.push_back(h.samples.back()[i]);
  out.checkpoint = Json{{"config", to_json(c)},
                        {"chain", {{"kept", h.samples.size()}, {"accept", h.accept}, {"burn_accept", h.burn_accept}}},
                        {"last_sample", last}};
  return out;
}

inline RunOutput run_toy(const ExperimentConfig& c, const RecordSink& sink) {
  if (c.method == "hmc") return run_toy_hmc(c, sink);
  const auto t0 = std::chrono::steady_clock::now();
  const ToyData d = gen_toy(split_seed(c.seed, 0));
  const Bnn m = build_bnn(c, 1, d.x, d.y, true, false, std::log(d.noise_var));
  const Objective obj = bnn_objective(m);
  RunOutput out;
  out.config = c;
  auto evaluate = [&](std::size_t epoch) {
    RandomNoise ev(split_seed(split_seed(c.seed, 3), epoch));
    MetricsRecord r = blank_record(c);
    r.epoch = epoch;
    r.datapoints = d.x.rows();
    r.kl_scale = kl_scale(epoch, {c.tempering, 10, 0.1});
    std::tie(r.elbo_per_datapoint, r.elbo_se) = elbo_estimate(obj, d.x, d.y, c.test_samples, ev);
    r.elbo = r.elbo_per_datapoint * static_cast<double>(d.x.rows());
    r.train_ll = mean_of(predict(m, d.x, d.y, c.test_samples, ev).log_density);
    if (epoch == c.epochs) {
      std::vector<double> raw;
      const Tensor gx = toy_grid_inputs(d, raw);
      const Prediction p = predict(m, gx, Tensor(), c.test_samples, ev);
      r.gap_std = fill_toy_grid(d, raw, p.mean, p.var, out.grid);
      for (std::size_t l = 0; l < m.layers.size(); ++l)
        r.function_variance.push_back(metric_function_variance(m, c.variance_inputs, l, c.variance_samples,
                                                               split_seed(split_seed(c.seed, 6), l)));
    }
    r.wall_time = elapsed(t0);
    emit(out, r, sink);
  };
  train(m.parameters(), d.x, d.y, c, obj, [&](std::size_t e) {
    if (due(c, e)) evaluate(e);
  });
  out.checkpoint = checkpoint_json(c, m.parameters());
  return out;
}

inline RunOutput run_linear(const ExperimentConfig& c, const RecordSink& sink) {
  const auto t0 = std::chrono::steady_clock::now();
  const LinearData d = gen_linear(split_seed(c.seed, 0));
  ExperimentConfig lc = c;
  lc.bias = false;
  const Bnn m = build_bnn(lc, d.x_train.cols(), d.x_train, d.y_train, false, false, std::log(LinearData::noise_var));
  const Objective obj = bnn_objective(m);
  RunOutput out;
  out.config = c;
  train(m.parameters(), d.x_train, d.y_train, c, obj, [&](std::size_t e) {
    if (!due(c, e)) return;
    RandomNoise ev(split_seed(split_seed(c.seed, 3), e));
    MetricsRecord r = blank_record(c);
    r.epoch = e;
    r.datapoints = d.x_train.rows();
    r.kl_scale = kl_scale(e, {c.tempering, 10, 0.1});
    std::tie(r.elbo_per_datapoint, r.elbo_se) = elbo_estimate(obj, d.x_train, d.y_train, c.test_samples, ev);
    r.elbo = r.elbo_per_datapoint * static_cast<double>(d.x_train.rows());
    r.evidence = d.evidence;
    const Prediction p = predict(m, d.x_test, d.y_test, c.test_samples, ev);
    r.test_ll = mean_of(p.log_density);
    double se = 0.0;
    for (std::size_t i = 0; i < d.y_test.size(); ++i) se += std::pow(p.mean[i] - d.y_test[i], 2);
    r.rmse = std::sqrt(se / static_cast<double>(d.y_test.size()));
    r.wall_time = elapsed(t0);
    emit(out, r, sink);
  });
  out.checkpoint = checkpoint_json(c, m.parameters());
  return out;
}

inline RunOutput run_uci(const ExperimentConfig& c, const RecordSink& sink) {
  const auto t0 = std::chrono::steady_clock::now();
  const TabularSplit d = load_tabular(c.dataset, c.split, c.test_fraction);
  const Bnn m = build_bnn(c, d.x_train.cols(), d.x_train, d.y_train, true, true, c.noise_log_var);
  const Objective obj = bnn_objective(m);
  RunOutput out;
  out.config = c;
  const double ys = d.y_norm.std[0];
  train(m.parameters(), d.x_train, d.y_train, c, obj, [&](std::size_t e) {
    if (!due(c, e)) return;
    RandomNoise ev(split_seed(split_seed(c.seed, 3), e));
    MetricsRecord r = blank_record(c);
    r.epoch = e;
    r.datapoints = d.x_train.rows();
    r.kl_scale = kl_scale(e, {c.tempering, 10, 0.1});
    std::tie(r.elbo_per_datapoint, r.elbo_se) = elbo_estimate(obj, d.x_train, d.y_train, c.test_samples, ev);
    r.elbo = r.elbo_per_datapoint * static_cast<double>(d.x_train.rows());
    const Prediction p = predict(m, d.x_test, d.y_test, c.test_samples, ev);
    r.test_ll = mean_of(p.log_density) - std::log(ys);
    double se = 0.0;
    for (std::size_t i = 0; i < d.y_test.size(); ++i) se += std::pow((p.mean[i] - d.y_test[i]) * ys, 2);
    r.rmse = std::sqrt(se / static_cast<double>(d.y_test.size()));
    r.wall_time = elapsed(t0);
    emit(out, r, sink);
  });
  out.checkpoint = checkpoint_json(c, m.parameters());
  return out;
}

inline RunOutput run_compositional(const ExperimentConfig& c, const RecordSink& sink) {
  const auto t0 = std::chrono::steady_clock::now();
  const DgpToyData d = gen_dgp_toy(split_seed(c.seed, 0));
  DgpConfig dc;
  dc.widths = {1};
  dc.widths.insert(dc.widths.end(), c.hidden.begin(), c.hidden.end());
  dc.widths.push_back(1);
  dc.families = {parse_family(c.method)};
  dc.kernel = parse_kernel(c.kernel);
  dc.prior = parse_prior(c.prior);
  dc.inducing = c.inducing;
  dc.noise_log_var = c.noise_log_var;
  Rng rng(split_seed(c.seed, 1));
  const Dgp m = make_dgp(dc, d.x, d.y, rng);
  const Objective obj = dgp_objective(m);
  RunOutput out;
  out.config = c;
  train(m.parameters(), d.x, d.y, c, obj, [&](std::size_t e) {
    if (!due(c, e)) return;
    RandomNoise ev(split_seed(split_seed(c.seed, 3), e));
    MetricsRecord r = blank_record(c);
    r.epoch = e;
    r.datapoints = d.x.rows();
    r.kl_scale = kl_scale(e, {c.tempering, 10, 0.1});
    std::tie(r.elbo_per_datapoint, r.elbo_se) = elbo_estimate(obj, d.x, d.y, c.test_samples, ev);
    r.elbo = r.elbo_per_datapoint * static_cast<double>(d.x.rows());
    r.train_ll = mean_of(dgp_predict(m, d.x, d.y, c.test_samples, ev).log_density);
    if (e == c.epochs) {
      for (std::size_t l = 0; l < m.layers.size(); ++l)
        r.function_variance.push_back(metric_function_variance(m, c.variance_inputs, l, c.variance_samples,
                                                               split_seed(split_seed(c.seed, 6), l)));
      const std::size_t g = 121;
      Tensor xr({g, 1});
      for (std::size_t i = 0; i < g; ++i) xr[i] = -4.5 + 9.0 * static_cast<double>(i) / static_cast<double>(g - 1);
      const Prediction p = dgp_predict(m, d.x_norm.apply(xr), Tensor(), c.test_samples, ev);
      out.grid.clear();
      for (std::size_t i = 0; i < g; ++i)
        out.grid.push_back({xr[i], p.mean[i] * d.y_norm.std[0] + d.y_norm.mean[0], std::sqrt(p.var[i]) * d.y_norm.std[0]});
    }
    r.wall_time = elapsed(t0);
    emit(out, r, sink);
  });
  out.checkpoint = checkpoint_json(c, m.parameters());
  return out;
}

}  // namespace detail

/// Trains and evaluates one configuration. Records are passed to `sink` as
/// they are produced. Throws on configuration or numerical errors.
inline RunOutput run_experiment(const ExperimentConfig& c, const RecordSink& sink = {}) {
  validate(c);
  if (c.experiment == "toy" || c.experiment == "inducing_sweep") return detail::run_toy(c, sink);
  if (c.experiment == "linear") return detail::run_linear(c, sink);
  if (c.experiment == "uci") return detail::run_uci(c, sink);
  return detail::run_compositional(c, sink);
}

enum class RunStatus { Ok, ConfigFailure, NumericalFailure };

struct BatchResult {
  std::vector<RunOutput> runs;
  std::vector<RunStatus> status;
};

/// Runs every configuration in order. A failing run is recorded as an error
/// record and the batch continues: configuration, ingestion and shape errors
/// give status "config_error", anything else "numerical_error".
inline BatchResult run_batch(const std::vector<ExperimentConfig>& configs, const RecordSink& sink = {}) {
  BatchResult b;
  for (const auto& c : configs) {
    const auto t0 = std::chrono::steady_clock::now();
    auto fail = [&](const char* status, const std::exception& e, RunStatus s) {
      RunOutput out;
      out.config = c;
      MetricsRecord r = detail::blank_record(c);
      r.status = status;
      r.error = e.what();
      r.wall_time = detail::elapsed(t0);
      detail::emit(out, r, sink);
      b.runs.push_back(std::move(out));
      b.status.push_back(s);
    };
    try {
      b.runs.push_back(run_experiment(c, sink));
      b.status.push_back(RunStatus::Ok);
    } catch (const ConfigError& e) {
      fail("config_error", e, RunStatus::ConfigFailure);
    } catch (const IngestionError& e) {
      fail("config_error", e, RunStatus::ConfigFailure);
    } catch (const ShapeError& e) {
      fail("config_error", e, RunStatus::ConfigFailure);
    } catch (const std::exception& e) {
      fail("numerical_error", e, RunStatus::NumericalFailure);
    }
  }
  return b;
}

}  // namespace gibayes
