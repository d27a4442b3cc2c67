#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ostream.h>
#include <json.hpp>

#include "aptab/agents.hpp"
#include "aptab/config.hpp"
#include "aptab/inference.hpp"
#include "aptab/io.hpp"
#include "aptab/metrics.hpp"
#include "aptab/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace aptab {
namespace {

// Primary outputs go either to a file or to stdout.
class Output {
 public:
  explicit Output(const std::string& path) {
    if (path.empty() || path == "-") return;
    file_.open(path);
    if (!file_) throw std::runtime_error(fmt::format("cannot write {}", path));
  }
  std::ostream& stream() { return file_.is_open() ? file_ : std::cout; }

 private:
  std::ofstream file_;
};

struct PretrainArgs {
  std::string config;
  std::string resume;
  std::string output;
};

int run_pretrain(const PretrainArgs& args) {
  TrainConfig config = load_train_config(args.config);
  if (!args.output.empty()) config.output_dir = args.output;
  if (config.output_dir.empty()) config.output_dir = "run";
  std::optional<fs::path> resume;
  if (!args.resume.empty()) resume = args.resume;
  const auto result = pretrain(config, resume);
  json summary{{"steps", result.log.steps.size()},
               {"output_dir", config.output_dir.string()},
               {"checkpoint", (config.output_dir / "model.ckpt").string()},
               {"checksum", result.model.checksum()}};
  if (!result.log.steps.empty()) summary["final_nll"] = result.log.steps.back().nll;
  if (!result.log.evals.empty() && std::isfinite(result.log.evals.back().auc)) {
    summary["final_auc"] = result.log.evals.back().auc;
  }
  std::cout << summary.dump() << '\n';
  return 0;
}

struct PredictArgs {
  std::string checkpoint;
  std::string train;
  std::string test;
  std::string target;
  std::size_t ensemble = 1;
  std::string output;
  std::uint64_t seed = 0;
  std::size_t batch_cap = kDefaultBatchCap;
  std::size_t feature_budget = kDefaultFeatureBudget;
};

int run_predict(const PredictArgs& args) {
  const Model model = Model::load(args.checkpoint);
  IngestOptions ingest;
  ingest.target = args.target;
  const Ingested train = ingest_csv(args.train, ingest);
  const Dataset test = apply_schema(read_csv(args.test), train.schema, false);
  InferenceOptions options{args.feature_budget, args.batch_cap, args.seed};
  const Prediction p =
      args.ensemble > 1 ? permutation_ensemble(model, train.data, test, args.ensemble, options).prediction
                        : predict(model, train.data, test, options);

  Output out(args.output);
  auto& os = out.stream();
  if (p.task == TaskKind::kClassification) {
    const auto& names = train.schema.target.categories;
    os << "row";
    for (int c : p.classes) os << ",p_" << names.at(static_cast<std::size_t>(c));
    os << '\n';
    const std::size_t k = p.classes.size();
    for (std::size_t i = 0; i < p.rows(); ++i) {
      os << i;
      for (std::size_t j = 0; j < k; ++j) os << ',' << format_real(p.probs[i * k + j]);
      os << '\n';
    }
  } else {
    os << "row,mean,stddev\n";
    for (std::size_t i = 0; i < p.rows(); ++i) {
      os << i << ',' << format_real(p.mean[i]) << ',' << format_real(p.stddev[i]) << '\n';
    }
  }
  return 0;
}

struct EvaluateArgs {
  std::string checkpoint;
  std::string suite;
  std::size_t splits = 5;
  std::string target;
  std::uint64_t seed = 0;
  std::size_t ensemble = 1;
  std::string records;
};

// Class frequencies (or mean and std) of the training rows.
Prediction class_prior(const Dataset& train, std::size_t test_rows) {
  Prediction p;
  p.task = train.task;
  if (train.task == TaskKind::kClassification) {
    std::map<int, double> counts;
    for (int label : train.labels) counts[label] += 1;
    std::vector<Real> probs;
    for (std::size_t i = 0; i < test_rows; ++i) {
      for (const auto& [label, count] : counts) {
        probs.push_back(static_cast<Real>(count / static_cast<double>(train.rows())));
      }
    }
    for (const auto& entry : counts) p.classes.push_back(entry.first);
    p.probs = Tensor({test_rows, p.classes.size()}, std::move(probs));
  } else {
    std::vector<double> y(train.y.data().begin(), train.y.data().end());
    const double mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
    p.mean = Tensor::full({test_rows}, static_cast<Real>(mean));
    p.stddev = Tensor::full({test_rows}, static_cast<Real>(std::max(population_std(y), 1e-4)));
  }
  return p;
}

double score(const Prediction& p, const Dataset& test) {
  if (test.task == TaskKind::kClassification) {
    std::vector<int> present(test.labels);
    std::sort(present.begin(), present.end());
    if (std::unique(present.begin(), present.end()) - present.begin() < 2) return std::nan("");
    return roc_auc_ovo(p, test.labels);
  }
  return mean_squared_error(p.mean.data(), test.y.data());
}

void print_report(std::ostream& os, const std::string& title, const MetricReport& report,
                  const std::vector<std::string>& datasets) {
  os << title << '\n';
  os << fmt::format("{:<14}{:>10}{:>12}{:>12}{:>11}{:>9}{:>6}{:>6}{:>6}\n", "algorithm", "mean",
                    "std(mean)", "mean(std)", "mean rank", "median", "min", "max", "wins");
  for (const auto& a : report.algorithms) {
    os << fmt::format("{:<14}{:>10.4f}{:>12.4f}{:>12.4f}{:>11.2f}{:>9.1f}{:>6.0f}{:>6.0f}{:>6}\n",
                      a.name, a.mean_score, a.std_of_mean, a.mean_of_std, a.mean_rank,
                      a.median_rank, a.min_rank, a.max_rank, a.wins);
  }
  os << fmt::format("datasets: {}", datasets.size());
  if (report.nan_scores) os << fmt::format(", undefined scores: {}", report.nan_scores);
  os << "\n\n";
}

int run_evaluate(const EvaluateArgs& args) {
  if (args.splits == 0) throw std::invalid_argument("evaluate: --splits must be at least 1");
  const Model model = Model::load(args.checkpoint);
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(args.suite)) {
    if (entry.is_regular_file() && entry.path().extension() == ".csv") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error(fmt::format("evaluate: no CSV files in {}", args.suite));

  const std::vector<std::string> algorithms{"aptab", "class-prior"};
  struct Group {
    std::vector<std::string> names;
    std::vector<std::vector<std::vector<double>>> scores;  // [split][dataset][algorithm]
  };
  Group classification;
  Group regression;
  for (auto* g : {&classification, &regression}) g->scores.resize(args.splits);

  Output records(args.records);
  const bool emit = !args.records.empty();
  for (std::size_t f = 0; f < files.size(); ++f) {
    const CsvTable table = read_csv(files[f]);
    if (table.header.empty()) throw std::runtime_error(fmt::format("{}: no header", files[f].string()));
    IngestOptions ingest;
    ingest.target = args.target.empty() ? table.header.back() : args.target;
    const Ingested in = ingest_table(table, ingest);
    const Dataset& d = in.data;
    Group& group = d.task == TaskKind::kClassification ? classification : regression;
    const std::string name = files[f].stem().string();
    group.names.push_back(name);
    const std::size_t n = d.rows();
    const std::size_t n_train = static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(n)));
    if (n_train < 1 || n_train >= n) {
      throw std::runtime_error(fmt::format("{}: too few rows for an 80-20 split", name));
    }
    for (std::size_t s = 0; s < args.splits; ++s) {
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng rng(derive_seed(args.seed, {key(Stream::kEvaluation), 3, f, s}));
      std::shuffle(order.begin(), order.end(), rng);
      const Dataset train = d.take_rows(std::span(order).first(n_train));
      const Dataset test = d.take_rows(std::span(order).subspan(n_train));
      InferenceOptions options;
      options.seed = derive_seed(args.seed, {key(Stream::kEvaluation), 4, f, s});
      const Prediction ours =
          args.ensemble > 1 ? permutation_ensemble(model, train, test, args.ensemble, options).prediction
                            : predict(model, train, test, options);
      const std::vector<double> row{score(ours, test), score(class_prior(train, test.rows()), test)};
      group.scores[s].push_back(row);
      if (emit) {
        for (std::size_t a = 0; a < algorithms.size(); ++a) {
          json r{{"type", "score"}, {"dataset", name}, {"split", s}, {"algorithm", algorithms[a]},
                 {"metric", d.task == TaskKind::kClassification ? "roc_auc_ovo" : "mse"}};
          r["score"] = std::isfinite(row[a]) ? json(row[a]) : json(nullptr);
          records.stream() << r.dump() << '\n';
        }
      }
    }
  }

  auto finish = [&](const Group& g, bool higher, const std::string& title) {
    if (g.names.empty()) return;
    const MetricReport report = rank_and_wins(g.scores, algorithms, higher);
    print_report(std::cout, title, report, g.names);
    if (!emit) return;
    for (const auto& a : report.algorithms) {
      records.stream() << json{{"type", "summary"},     {"metric", higher ? "roc_auc_ovo" : "mse"},
                               {"algorithm", a.name},   {"mean", a.mean_score},
                               {"std_of_mean", a.std_of_mean}, {"mean_of_std", a.mean_of_std},
                               {"mean_rank", a.mean_rank},     {"median_rank", a.median_rank},
                               {"min_rank", a.min_rank},       {"max_rank", a.max_rank},
                               {"wins", a.wins}}
                              .dump()
                       << '\n';
    }
  };
  finish(classification, true, fmt::format("ROC-AUC (OVO), {} splits of 80-20", args.splits));
  finish(regression, false, fmt::format("MSE, {} splits of 80-20", args.splits));
  return 0;
}

struct AnalyzeArgs {
  std::string config;
  std::size_t datasets = 2000;
  std::string checkpoint;
  std::string output;
  std::uint64_t seed = 0;
  std::size_t rows = 0;
  std::size_t ascent_steps = 0;
};

int run_analyze(const AnalyzeArgs& args) {
  if (args.datasets == 0) throw std::invalid_argument("analyze-prior: --datasets must be positive");
  const TrainConfig config = load_train_config(args.config);
  GeneratorHyperSpace space = config.prior;
  space.features = {2, 2};
  space.regression_probability = 0;
  space.validate();
  const Model model = args.checkpoint.empty() ? Model(config.model, config.seed)
                                              : Model::load(args.checkpoint);

  CollectionOptions options;
  options.count = args.datasets;
  options.rows = args.rows ? args.rows : std::max<std::size_t>(8, 100000 / args.datasets);
  options.ascent_steps = args.ascent_steps;
  options.seed = derive_seed(args.seed, {1});
  const auto ordinary = ordinary_collection(space, options);
  options.seed = derive_seed(args.seed, {2});
  const auto ordinary_prime = ordinary_collection(space, options);
  options.seed = derive_seed(args.seed, {3});
  std::size_t failures = 0;
  const auto adversarial = adversarial_collection(model, space, config.agents, options, &failures);

  const DiversityReport same = prior_diversity_report(ordinary, ordinary_prime);
  const DiversityReport adv = prior_diversity_report(ordinary, adversarial);
  json report{{"datasets", args.datasets},
              {"rows_per_dataset", options.rows},
              {"ascent_steps", options.ascent_steps},
              {"seed", args.seed},
              {"kl_ordinary_ordinary", same.kl},
              {"kl_ordinary_adversarial", adv.kl},
              {"pearson_ordinary", {same.pearson_a_mean, same.pearson_a_std}},
              {"pearson_ordinary_prime", {same.pearson_b_mean, same.pearson_b_std}},
              {"pearson_adversarial", {adv.pearson_b_mean, adv.pearson_b_std}},
              {"points", same.points_a},
              {"agent_replacements", failures}};
  std::cout << report.dump() << '\n';

  if (!args.output.empty()) {
    fs::create_directories(args.output);
    std::ofstream(fs::path(args.output) / "report.json") << report.dump(2) << '\n';
    std::ofstream grid(fs::path(args.output) / "densities.csv");
    const DiversityOptions grid_options;
    const std::size_t bins = grid_options.bins;
    const double width = (grid_options.hi - grid_options.lo) / static_cast<double>(bins);
    grid << "x0,x1,ordinary,ordinary_prime,adversarial\n";
    for (std::size_t i = 0; i < bins; ++i) {
      for (std::size_t j = 0; j < bins; ++j) {
        const std::size_t cell = i * bins + j;
        grid << format_real(grid_options.lo + (static_cast<double>(i) + 0.5) * width) << ','
             << format_real(grid_options.lo + (static_cast<double>(j) + 0.5) * width) << ','
             << format_real(same.density_a[cell]) << ',' << format_real(same.density_b[cell])
             << ',' << format_real(adv.density_b[cell]) << '\n';
      }
    }
  }
  return 0;
}

}  // namespace
}  // namespace aptab

int main(int argc, char** argv) {
  using namespace aptab;
  CLI::App app{"Adversarially pre-trained in-context learner for tabular data"};
  app.set_version_flag("--version", std::string(APTAB_VERSION));
  app.require_subcommand(1);

  PretrainArgs pretrain_args;
  auto* pre = app.add_subcommand("pretrain", "Pre-train a model on the synthetic prior");
  pre->add_option("--config", pretrain_args.config, "INI run configuration")->required();
  pre->add_option("--resume", pretrain_args.resume, "state.ckpt to continue from");
  pre->add_option("--output", pretrain_args.output, "Output directory (overrides the config)");

  PredictArgs predict_args;
  auto* pred = app.add_subcommand("predict", "Zero-shot prediction for a test CSV");
  pred->add_option("--checkpoint", predict_args.checkpoint)->required();
  pred->add_option("--train", predict_args.train, "Training CSV")->required();
  pred->add_option("--test", predict_args.test, "Test CSV (target column optional)")->required();
  pred->add_option("--target", predict_args.target, "Target column name")->required();
  pred->add_option("--ensemble", predict_args.ensemble, "Feature-permutation members")
      ->check(CLI::PositiveNumber);
  pred->add_option("--output", predict_args.output, "Prediction CSV (default stdout)");
  pred->add_option("--seed", predict_args.seed);
  pred->add_option("--batch-cap", predict_args.batch_cap)->check(CLI::PositiveNumber);
  pred->add_option("--feature-budget", predict_args.feature_budget)->check(CLI::PositiveNumber);

  EvaluateArgs eval_args;
  auto* eval = app.add_subcommand("evaluate", "Score a directory of CSV datasets");
  eval->add_option("--checkpoint", eval_args.checkpoint)->required();
  eval->add_option("--suite", eval_args.suite, "Directory of CSV files")->required();
  eval->add_option("--splits", eval_args.splits, "Seeded 80-20 splits per dataset")->required();
  eval->add_option("--target", eval_args.target, "Target column (default: last column)");
  eval->add_option("--seed", eval_args.seed);
  eval->add_option("--ensemble", eval_args.ensemble)->check(CLI::PositiveNumber);
  eval->add_option("--records", eval_args.records, "NDJSON score records");

  AnalyzeArgs analyze_args;
  auto* analyze = app.add_subcommand("analyze-prior", "Diversity of ordinary and adversarial data");
  analyze->add_option("--config", analyze_args.config, "INI run configuration")->required();
  analyze->add_option("--datasets", analyze_args.datasets, "Datasets per collection")->required();
  analyze->add_option("--checkpoint", analyze_args.checkpoint, "Model the agents ascend against");
  analyze->add_option("--output", analyze_args.output, "Directory for report.json and densities.csv");
  analyze->add_option("--seed", analyze_args.seed);
  analyze->add_option("--rows", analyze_args.rows, "Rows per dataset (default 100000 / datasets)");
  analyze->add_option("--ascent-steps", analyze_args.ascent_steps,
                      "Agent warm-up rounds before datasets are kept");

  std::string command = "aptab";
  try {
    app.parse(argc, argv);
    if (*pre) return (command = "pretrain", run_pretrain(pretrain_args));
    if (*pred) return (command = "predict", run_predict(predict_args));
    if (*eval) return (command = "evaluate", run_evaluate(eval_args));
    if (*analyze) return (command = "analyze-prior", run_analyze(analyze_args));
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << json{{"error", e.what()}, {"command", command}, {"kind", "usage"}}.dump() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", e.what()}, {"command", command}}.dump() << '\n';
    return 1;
  }
  return 1;
}
