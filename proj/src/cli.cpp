#include "mtl/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mtl/experiment.hpp"
#include "mtl/metrics.hpp"
#include "mtl/plot.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mtl {

namespace {

std::vector<std::string> split_list(const std::string& csv) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : csv) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> balancer;
  bool all_balancers = false;
  std::optional<std::string> aux;
  std::optional<std::string> target;
  std::optional<int> threads;
};

void add_common(CLI::App* cmd, CommonFlags& flags, bool config_required = true) {
  auto* opt = cmd->add_option("--config", flags.config, "JSON config file");
  if (config_required) opt->required();
  cmd->add_option("--seed", flags.seed, "master seed (overrides config)");
  cmd->add_option("--out", flags.out, "output directory (overrides config)");
  cmd->add_option("--balancer", flags.balancer,
                  "balancer name or 'baseline' (overrides config)");
  cmd->add_flag("--all-balancers", flags.all_balancers,
                "sweep baseline plus all 16 balancers on one fold plan");
  cmd->add_option("--aux", flags.aux,
                  "comma-separated auxiliary target columns (overrides config)");
  cmd->add_option("--target", flags.target,
                  "main target column (overrides config)");
  cmd->add_option("--threads", flags.threads, "worker threads (0 = auto)");
}

ExperimentConfig effective_config(const CommonFlags& flags) {
  ExperimentConfig cfg = load_experiment_config(flags.config);
  if (flags.seed) cfg.seed = *flags.seed;
  if (flags.out) cfg.out_dir = *flags.out;
  if (flags.balancer) cfg.balancer = *flags.balancer;
  if (flags.all_balancers) cfg.all_balancers = true;
  if (flags.aux) cfg.aux = split_list(*flags.aux);
  if (flags.target) cfg.target = *flags.target;
  if (flags.threads) cfg.threads = *flags.threads;
  if (cfg.balancer == "baseline" && !flags.aux) cfg.aux.clear();
  cfg.validate();
  apply_master_seed(cfg);
  return cfg;
}

const BalancerSpec* make_spec(const ExperimentConfig& cfg, BalancerSpec& storage) {
  if (cfg.balancer == "baseline") return nullptr;
  storage = BalancerSpec::parse(cfg.balancer);
  storage.seed = cfg.seed;
  return &storage;
}

int cmd_synth(const std::string& spec_path, const std::string& out_dir) {
  const SynthSpec spec = load_synth_spec(spec_path);
  const Cohort cohort = synth_cohort(spec);
  write_cohort(cohort, out_dir);
  std::cout << "wrote " << cohort.patients.size() << " bags to " << out_dir
            << "\n";
  return 0;
}

int cmd_crossval(const CommonFlags& flags) {
  const ExperimentConfig cfg = effective_config(flags);
  const Cohort cohort = load_experiment_cohort(cfg);
  if (cfg.all_balancers) {
    const auto rows = run_sweep(cohort, cfg);
    write_sweep_summary(rows, (fs::path(cfg.out_dir) / "summary.csv").string());
    for (const auto& r : rows)
      std::cout << r.name << ": auroc " << r.auroc << ", auprc " << r.auprc
                << "\n";
    return 0;
  }
  BalancerSpec storage;
  const BalancerSpec* spec = make_spec(cfg, storage);
  const RunReport report = run_crossval(cohort, cfg.model, cfg.train, spec);
  write_run_outputs(report, cfg, cfg.out_dir);
  std::cout << report.balancer << ": mean auroc " << report.mean_auroc
            << ", auprc " << report.mean_auprc << ", silhouette "
            << report.mean_silhouette << "\n";
  return 0;
}

int cmd_train(const CommonFlags& flags) {
  const ExperimentConfig cfg = effective_config(flags);
  const Cohort cohort = load_experiment_cohort(cfg);
  BalancerSpec storage;
  const BalancerSpec* spec = make_spec(cfg, storage);
  const TrainedModel trained = train_full(cohort, cfg.model, cfg.train, spec);
  fs::create_directories(cfg.out_dir);
  save_checkpoint(trained.params, (fs::path(cfg.out_dir) / "model.mtlp").string());
  json j;
  j["config"] = json::parse(config_echo_json(cfg));
  j["epochs"] = trained.epochs;
  j["early_stopped"] = trained.early_stopped;
  j["loss_curves"] = trained.loss_curves;
  j["monitor_ce"] = trained.monitor_ce;
  j["aux_standardization"] = json::array();
  for (const auto& s : trained.aux_stats)
    j["aux_standardization"].push_back({{"mean", s.mean}, {"stddev", s.stddev}});
  std::ofstream out(fs::path(cfg.out_dir) / "train_report.json");
  out << j.dump(2) << "\n";
  std::cout << "trained " << trained.epochs << " epochs; checkpoint at "
            << (fs::path(cfg.out_dir) / "model.mtlp").string() << "\n";
  return 0;
}

int cmd_evaluate(const CommonFlags& flags, const std::string& model_path) {
  const ExperimentConfig cfg = effective_config(flags);
  const Cohort cohort = load_experiment_cohort(cfg);
  const ModelParams params = load_checkpoint(model_path);
  fs::create_directories(cfg.out_dir);

  ScoredCohort scored;
  std::vector<std::vector<double>> embeddings;
  std::ofstream pred(fs::path(cfg.out_dir) / "predictions.csv");
  pred << "patient,fold,score,label\n";
  char buf[64];
  for (const auto& p : cohort.patients) {
    const ForwardOutput out = forward(params, bag_tensor(p.bag));
    const double z0 = out.logits.at(0), z1 = out.logits.at(1);
    const double m = std::max(z0, z1);
    const double score = std::exp(z1 - m) / (std::exp(z0 - m) + std::exp(z1 - m));
    scored.scores.push_back(score);
    scored.labels.push_back(p.label);
    embeddings.push_back(out.cls_embedding.values());
    std::snprintf(buf, sizeof buf, "%.17g", score);
    pred << p.id << ",0," << buf << "," << p.label << "\n";
  }
  json j;
  j["config"] = json::parse(config_echo_json(cfg));
  j["model"] = model_path;
  j["auroc"] = auroc(scored);
  j["auprc"] = auprc(scored);
  j["silhouette"] = silhouette(embeddings, scored.labels);
  std::ofstream out(fs::path(cfg.out_dir) / "evaluation.json");
  out << j.dump(2) << "\n";
  std::cout << "auroc " << j["auroc"] << ", auprc " << j["auprc"]
            << ", silhouette " << j["silhouette"] << "\n";
  return 0;
}

int cmd_embed(const CommonFlags& flags, const std::string& model_path) {
  const ExperimentConfig cfg = effective_config(flags);
  const Cohort cohort = load_experiment_cohort(cfg);
  const ModelParams params = load_checkpoint(model_path);
  const EmbeddingTable table = export_embeddings(params, cohort);
  fs::create_directories(cfg.out_dir);
  std::ofstream out(fs::path(cfg.out_dir) / "embeddings.csv");
  out << "patient,label";
  for (int d = 0; d < params.config.model_dim; ++d) out << ",e" << d;
  out << "\n";
  char buf[64];
  for (std::size_t i = 0; i < table.patients.size(); ++i) {
    out << table.patients[i] << "," << table.labels[i];
    for (double v : table.vectors[i]) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out << "," << buf;
    }
    out << "\n";
  }
  std::cout << "wrote " << table.patients.size() << " embeddings\n";
  return 0;
}

int cmd_plot(const std::string& csv_path, const std::string& out_svg) {
  const EmbeddingTableFile table = read_embedding_csv(csv_path);
  const PlotResult result = plot_embeddings(table, out_svg);
  std::cout << "silhouette (2-D) = " << result.silhouette_2d << "; wrote "
            << out_svg << "\n";
  return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"weakly-supervised joint multi-task bag transformer"};
  app.require_subcommand(1);

  std::string synth_spec, synth_out = "out";
  auto* synth = app.add_subcommand("synth", "generate a synthetic cohort");
  synth->add_option("--config", synth_spec, "synth spec JSON")->required();
  synth->add_option("--out", synth_out, "output directory");

  CommonFlags cv_flags;
  auto* crossval =
      app.add_subcommand("crossval", "k-fold cross-validation experiment");
  add_common(crossval, cv_flags);

  CommonFlags train_flags;
  auto* train = app.add_subcommand("train", "train one model on the cohort");
  add_common(train, train_flags);

  CommonFlags eval_flags;
  std::string eval_model;
  auto* evaluate = app.add_subcommand("evaluate", "score a cohort with a checkpoint");
  add_common(evaluate, eval_flags);
  evaluate->add_option("--model", eval_model, "MTLP checkpoint")->required();

  CommonFlags embed_flags;
  std::string embed_model;
  auto* embed = app.add_subcommand("embed", "export embeddings with a checkpoint");
  add_common(embed, embed_flags);
  embed->add_option("--model", embed_model, "MTLP checkpoint")->required();

  std::string plot_csv, plot_out = "embedding.svg";
  auto* plot = app.add_subcommand("plot", "PCA scatter of an embeddings CSV");
  plot->add_option("--input", plot_csv, "embeddings.csv")->required();
  plot->add_option("--out", plot_out, "output SVG path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed()) return cmd_synth(synth_spec, synth_out);
    if (crossval->parsed()) return cmd_crossval(cv_flags);
    if (train->parsed()) return cmd_train(train_flags);
    if (evaluate->parsed()) return cmd_evaluate(eval_flags, eval_model);
    if (embed->parsed()) return cmd_embed(embed_flags, embed_model);
    if (plot->parsed()) return cmd_plot(plot_csv, plot_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace mtl
