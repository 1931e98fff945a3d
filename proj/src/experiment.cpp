#include "mtl/experiment.hpp"

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace mtl {

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

json read_json_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

template <typename T>
void maybe_get(const json& j, const char* key, T& out, const std::string& path) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(path + ": field '" + key + "': " + e.what());
  }
}

SynthSpec parse_synth(const json& j, const std::string& path) {
  SynthSpec s;
  maybe_get(j, "patients", s.patients, path);
  maybe_get(j, "dim", s.dim, path);
  maybe_get(j, "bag_min", s.bag_min, path);
  maybe_get(j, "bag_max", s.bag_max, path);
  maybe_get(j, "signal_dim", s.signal_dim, path);
  maybe_get(j, "signal_shift", s.signal_shift, path);
  maybe_get(j, "label_threshold", s.label_threshold, path);
  maybe_get(j, "flip_noise", s.flip_noise, path);
  maybe_get(j, "aux_correlation", s.aux_correlation, path);
  maybe_get(j, "seed", s.seed, path);
  s.validate();
  return s;
}

json synth_json(const SynthSpec& s) {
  return json{{"patients", s.patients},
              {"dim", s.dim},
              {"bag_min", s.bag_min},
              {"bag_max", s.bag_max},
              {"signal_dim", s.signal_dim},
              {"signal_shift", s.signal_shift},
              {"label_threshold", s.label_threshold},
              {"flip_noise", s.flip_noise},
              {"aux_correlation", s.aux_correlation},
              {"seed", s.seed}};
}

}  // namespace

void ExperimentConfig::validate() const {
  const bool file_data = manifest.has_value() || clinical.has_value();
  if (file_data && (!manifest.has_value() || !clinical.has_value()))
    throw ConfigError("config: file data needs both manifest and clinical");
  if (file_data == synth.has_value())
    throw ConfigError("config: exactly one of data files or synth spec required");
  if (balancer != "baseline") BalancerSpec::parse(balancer);
  if (balancer == "baseline" && !aux.empty())
    throw ConfigError("config: baseline mode requires an empty aux list");
  if (balancer != "baseline" && aux.empty() && !synth.has_value())
    throw ConfigError("config: balancer '" + balancer +
                      "' needs auxiliary targets (--aux)");
  if (threads < 0) throw ConfigError("config: threads must be >= 0");
  train.validate();
}

ExperimentConfig load_experiment_config(const std::string& path) {
  const json j = read_json_config(path);
  ExperimentConfig cfg;
  if (j.contains("data")) {
    const json& d = j.at("data");
    if (d.contains("manifest")) cfg.manifest = d.at("manifest").get<std::string>();
    if (d.contains("clinical")) cfg.clinical = d.at("clinical").get<std::string>();
    if (d.contains("synth")) cfg.synth = parse_synth(d.at("synth"), path);
  }
  maybe_get(j, "target", cfg.target, path);
  maybe_get(j, "aux", cfg.aux, path);
  if (j.contains("model")) {
    const json& m = j.at("model");
    maybe_get(m, "input_dim", cfg.model.input_dim, path);
    maybe_get(m, "model_dim", cfg.model.model_dim, path);
    maybe_get(m, "encoder_layers", cfg.model.encoder_layers, path);
    maybe_get(m, "decoder_layers", cfg.model.decoder_layers, path);
    maybe_get(m, "heads", cfg.model.heads, path);
    maybe_get(m, "ff_dim", cfg.model.ff_dim, path);
    maybe_get(m, "dropout", cfg.model.dropout, path);
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    maybe_get(t, "lr", cfg.train.lr, path);
    maybe_get(t, "max_epochs", cfg.train.max_epochs, path);
    maybe_get(t, "patience", cfg.train.patience, path);
    maybe_get(t, "folds", cfg.train.folds, path);
    maybe_get(t, "monitor_fraction", cfg.train.monitor_fraction, path);
    maybe_get(t, "weight_decay", cfg.train.weight_decay, path);
    maybe_get(t, "beta1", cfg.train.beta1, path);
    maybe_get(t, "beta2", cfg.train.beta2, path);
    maybe_get(t, "eps", cfg.train.eps, path);
  }
  maybe_get(j, "balancer", cfg.balancer, path);
  maybe_get(j, "all_balancers", cfg.all_balancers, path);
  maybe_get(j, "out", cfg.out_dir, path);
  maybe_get(j, "seed", cfg.seed, path);
  maybe_get(j, "threads", cfg.threads, path);
  return cfg;
}

SynthSpec load_synth_spec(const std::string& path) {
  return parse_synth(read_json_config(path), path);
}

void apply_master_seed(ExperimentConfig& cfg) {
  cfg.model.seed = cfg.seed;
  cfg.train.seed = cfg.seed;
}

Cohort load_experiment_cohort(const ExperimentConfig& cfg) {
  if (cfg.synth.has_value()) {
    Cohort cohort = synth_cohort(*cfg.synth);
    if (cfg.balancer == "baseline" && !cfg.all_balancers) {
      cohort.aux_names.clear();
      for (auto& p : cohort.patients) p.aux.clear();
    }
    return cohort;
  }
  std::vector<std::string> aux = cfg.aux;
  return load_cohort(*cfg.manifest, *cfg.clinical, cfg.target, aux);
}

std::string config_echo_json(const ExperimentConfig& cfg) {
  json j;
  if (cfg.manifest) j["data"]["manifest"] = *cfg.manifest;
  if (cfg.clinical) j["data"]["clinical"] = *cfg.clinical;
  if (cfg.synth) j["data"]["synth"] = synth_json(*cfg.synth);
  j["target"] = cfg.target;
  j["aux"] = cfg.aux;
  j["model"] = {{"input_dim", cfg.model.input_dim},
                {"model_dim", cfg.model.model_dim},
                {"encoder_layers", cfg.model.encoder_layers},
                {"decoder_layers", cfg.model.decoder_layers},
                {"heads", cfg.model.heads},
                {"ff_dim", cfg.model.ff_dim},
                {"dropout", cfg.model.dropout}};
  j["train"] = {{"lr", cfg.train.lr},
                {"max_epochs", cfg.train.max_epochs},
                {"patience", cfg.train.patience},
                {"folds", cfg.train.folds},
                {"monitor_fraction", cfg.train.monitor_fraction},
                {"weight_decay", cfg.train.weight_decay},
                {"beta1", cfg.train.beta1},
                {"beta2", cfg.train.beta2},
                {"eps", cfg.train.eps}};
  j["balancer"] = cfg.balancer;
  j["all_balancers"] = cfg.all_balancers;
  j["out"] = cfg.out_dir;
  j["seed"] = cfg.seed;
  j["threads"] = cfg.threads;
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// Report writers
// ---------------------------------------------------------------------------

namespace {

json report_json(const RunReport& report, const ExperimentConfig& cfg) {
  json j;
  j["balancer"] = report.balancer;
  j["config"] = json::parse(config_echo_json(cfg));
  j["aux_names"] = report.aux_names;
  j["fold_plan_hash"] = hex64(report.fold_plan_hash);
  j["mean"] = {{"auroc", report.mean_auroc},
               {"auprc", report.mean_auprc},
               {"silhouette", report.mean_silhouette}};
  j["folds"] = json::array();
  for (const auto& fr : report.folds) {
    json f;
    f["fold"] = fr.fold;
    f["auroc"] = fr.auroc;
    f["auprc"] = fr.auprc;
    f["silhouette"] = fr.silhouette;
    f["epochs"] = fr.epochs;
    f["early_stopped"] = fr.early_stopped;
    f["loss_curves"] = fr.loss_curves;
    f["monitor_ce"] = fr.monitor_ce;
    f["task_weights"] = fr.task_weights;
    f["aux_standardization"] = json::array();
    for (const auto& s : fr.aux_stats)
      f["aux_standardization"].push_back({{"mean", s.mean}, {"stddev", s.stddev}});
    j["folds"].push_back(std::move(f));
  }
  return j;
}

}  // namespace

void write_run_outputs(const RunReport& report, const ExperimentConfig& cfg,
                       const std::string& dir) {
  fs::create_directories(dir);
  {
    std::ofstream out(fs::path(dir) / "report.json");
    out << report_json(report, cfg).dump(2) << "\n";
  }
  {
    std::ofstream out(fs::path(dir) / "predictions.csv");
    out << "patient,fold,score,label\n";
    for (const auto& fr : report.folds)
      for (const auto& p : fr.predictions)
        out << p.patient << "," << fr.fold << "," << fmt_double(p.score) << ","
            << p.label << "\n";
  }
  {
    std::ofstream out(fs::path(dir) / "embeddings.csv");
    const int dim = report.model_config.model_dim;
    out << "patient,label";
    for (int d = 0; d < dim; ++d) out << ",e" << d;
    out << "\n";
    for (const auto& fr : report.folds)
      for (std::size_t i = 0; i < fr.embedding_patients.size(); ++i) {
        out << fr.embedding_patients[i] << "," << fr.embedding_labels[i];
        for (double v : fr.embeddings[i]) out << "," << fmt_double(v);
        out << "\n";
      }
  }
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

std::vector<SweepRow> run_sweep(const Cohort& cohort, const ExperimentConfig& cfg) {
  if (cohort.aux_names.empty())
    throw ConfigError("sweep: cohort has no auxiliary targets");
  const FoldPlan plan = crossval_plan(cohort, cfg.train);

  struct Job {
    std::string name;
    std::optional<BalancerSpec> spec;
  };
  std::vector<Job> jobs;
  jobs.push_back({"baseline", std::nullopt});
  for (const auto& spec : BalancerSpec::enumerate_all()) {
    BalancerSpec seeded = spec;
    seeded.seed = cfg.seed;
    jobs.push_back({seeded.name(), seeded});
  }

  std::vector<SweepRow> rows(jobs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;

  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      try {
        const Job& job = jobs[i];
        RunReport report = run_crossval_with_plan(
            cohort, cfg.model, cfg.train,
            job.spec.has_value() ? &*job.spec : nullptr, plan);
        ExperimentConfig echo = cfg;
        echo.balancer = job.name;
        write_run_outputs(report, echo,
                          (fs::path(cfg.out_dir) / job.name).string());
        rows[i] = {job.name, report.mean_auroc, report.mean_auprc,
                   report.mean_silhouette};
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };

  unsigned n_threads = cfg.threads > 0
                           ? static_cast<unsigned>(cfg.threads)
                           : std::max(1u, std::thread::hardware_concurrency());
  n_threads = std::min<unsigned>(n_threads, static_cast<unsigned>(jobs.size()));
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return rows;
}

void write_sweep_summary(const std::vector<SweepRow>& rows,
                         const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path);
  out << "balancer,auroc,auprc\n";
  for (const auto& r : rows)
    out << r.name << "," << fmt_double(r.auroc) << "," << fmt_double(r.auprc)
        << "\n";
}

}  // namespace mtl
