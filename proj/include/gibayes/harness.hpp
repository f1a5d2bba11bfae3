#pragma once

// Preset batches and the on-disk artifacts of a batch.

#include <filesystem>
#include <fstream>
#include <mutex>
#include <string>
#include <vector>

#include "experiment.hpp"

namespace gibayes {

enum class MetricsFormat { Json, Csv };

inline MetricsFormat parse_format(const std::string& s) {
  if (s == "json") return MetricsFormat::Json;
  if (s == "csv") return MetricsFormat::Csv;
  throw ConfigError("unknown format '" + s + "' (expected json or csv)");
}

struct PresetOptions {
  std::uint64_t seed = 0;
  std::string data_dir = "data";
  std::size_t epochs = 0;  // 0: preset default
  std::size_t splits = 5;
};

/// Configurations of a named preset: toy | linear | uci | sweep | compositional.
inline std::vector<ExperimentConfig> preset(const std::string& name, const PresetOptions& o = {}) {
  std::vector<ExperimentConfig> out;
  auto add = [&](ExperimentConfig c) {
    c.seed = o.seed;
    if (o.epochs != 0) {
      if (c.eval_every != 0) c.eval_every = std::min(c.eval_every, o.epochs);
      c.epochs = o.epochs;
    }
    out.push_back(std::move(c));
  };
  if (name == "toy") {
    for (const char* m : {"gi", "fac", "li", "hmc"}) {
      ExperimentConfig c;
      c.method = m;
      add(c);
    }
  } else if (name == "linear") {
    for (std::size_t width : {5, 50})
      for (std::size_t depth : {2, 4, 8})
        for (const char* m : {"fac", "li", "gi", "fac->gi", "rand->gi"}) {
          ExperimentConfig c;
          c.experiment = "linear";
          c.method = m;
          c.hidden.assign(depth - 1, width);
          c.bias = false;
          c.inducing = 10;
          c.train_samples = 1;
          c.test_samples = 10;
          c.epochs = 40000;
          c.eval_every = 1000;
          add(c);
        }
  } else if (name == "uci") {
    for (std::size_t split = 0; split < o.splits; ++split)
      for (const char* m : {"fac", "li", "gi", "fac->gi"}) {
        ExperimentConfig c;
        c.experiment = "uci";
        c.method = m;
        c.dataset = (std::filesystem::path(o.data_dir) / "boston_style.csv").string();
        c.split = split;
        c.epochs = 2500;
        add(c);
      }
  } else if (name == "sweep") {
    for (std::size_t m : {2, 5, 10, 20, 40}) {
      ExperimentConfig c;
      c.experiment = "inducing_sweep";
      c.inducing = m;
      add(c);
    }
  } else if (name == "compositional") {
    for (const char* m : {"gi", "li"}) {
      ExperimentConfig c;
      c.experiment = "compositional";
      c.method = m;
      c.hidden = {1};
      c.epochs = 2000;
      add(c);
    }
  } else {
    throw ConfigError("unknown preset '" + name + "'");
  }
  return out;
}

/// Writes the metrics stream (JSON lines or CSV, one line per record, flushed
/// per record), the predictive grid CSV, one checkpoint per run and a final
/// summary JSON into a directory.
class ArtifactWriter {
 public:
  ArtifactWriter(const std::filesystem::path& dir, MetricsFormat fmt) : dir_(dir), fmt_(fmt) {
    std::filesystem::create_directories(dir_ / "checkpoints");
    const auto name = fmt_ == MetricsFormat::Json ? "metrics.jsonl" : "metrics.csv";
    metrics_.open(dir_ / name, std::ios::trunc);
    if (!metrics_) throw ConfigError("cannot write to '" + (dir_ / name).string() + "'");
    if (fmt_ == MetricsFormat::Csv) {
      const auto& cols = metric_columns();
      for (std::size_t i = 0; i < cols.size(); ++i) metrics_ << (i ? "," : "") << cols[i];
      metrics_ << '\n' << std::flush;
    }
  }

  RecordSink sink() {
    return [this](const MetricsRecord& r) { write(r); };
  }

  void write(const MetricsRecord& r) {
    const std::string line = fmt_ == MetricsFormat::Json ? to_json(r).dump() : to_csv_row(r);
    const std::lock_guard<std::mutex> lock(mu_);
    metrics_ << line << '\n' << std::flush;
  }

  void finish(const BatchResult& b) const {
    std::ofstream grid(dir_ / "grid.csv", std::ios::trunc);
    grid << "run,method,seed,x,mean,std\n";
    Json summary = Json::array();
    for (const auto& run : b.runs) {
      for (const auto& g : run.grid)
        grid << csv_escape(run.config.id()) << ',' << csv_escape(run.config.method) << ',' << run.config.seed << ','
             << format_double(g.x) << ',' << format_double(g.mean) << ',' << format_double(g.std) << '\n';
      if (!run.checkpoint.is_null()) {
        std::ofstream ck(dir_ / "checkpoints" / (run.config.id() + ".json"), std::ios::trunc);
        ck << run.checkpoint.dump() << '\n';
      }
      summary.push_back({{"config", to_json(run.config)},
                         {"final", run.records.empty() ? Json(nullptr) : to_json(run.records.back())}});
    }
    std::ofstream(dir_ / "summary.json", std::ios::trunc) << summary.dump(2) << '\n';
  }

 private:
  std::filesystem::path dir_;
  MetricsFormat fmt_;
  std::ofstream metrics_;
  std::mutex mu_;
};

/// Process exit code for a batch: 0 when every run succeeded, 1 if any run
/// had a configuration error, otherwise 2 if any run failed numerically.
inline int exit_code(const BatchResult& b) {
  bool numerical = false;
  for (RunStatus s : b.status) {
    if (s == RunStatus::ConfigFailure) return 1;
    if (s == RunStatus::NumericalFailure) numerical = true;
  }
  return numerical ? 2 : 0;
}

}  // namespace gibayes
