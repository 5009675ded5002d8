// ssmil: command-line driver for data generation, pre-training, MIL
// training, evaluation, gradient checks and report aggregation.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ssmil/checkpoint.hpp"
#include "ssmil/config.hpp"
#include "ssmil/error.hpp"
#include "ssmil/gradcheck.hpp"
#include "ssmil/pipeline.hpp"

namespace fs = std::filesystem;
using namespace ssmil;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kNumerical = 2;
constexpr int kIo = 3;

struct ConfigFlags {
  std::string file;
  std::map<std::string, std::string> overrides;
};

void add_config_flags(CLI::App* cmd, ConfigFlags& flags) {
  cmd->add_option("--config", flags.file, "configuration file (key = value lines)");
  for (const auto& key : ConfigMap::registry()) {
    cmd->add_option_function<std::string>(
        "--" + key.key, [&flags, k = key.key](const std::string& v) { flags.overrides[k] = v; },
        key.help + " [default: " + key.default_value + "]");
  }
}

ConfigMap load_config(const ConfigFlags& flags) {
  ConfigMap map = flags.file.empty() ? ConfigMap{} : ConfigMap::parse_file(flags.file);
  for (const auto& [k, v] : flags.overrides) map.set(k, v);
  return map;
}

void print_summary(const MethodOutcome& outcome) {
  std::cout << format_report(std::string(to_string(outcome.method)), outcome.records);
  for (const auto& w : outcome.warnings) std::cerr << "warning: " << w << "\n";
}

int cmd_generate(const ConfigFlags& flags) {
  Experiment exp(load_config(flags), &std::cerr);
  if (!exp.config().dataset_path.empty()) throw InvalidParameter("generate: dataset.path must be empty");
  exp.write_config();
  const auto& data = exp.dataset();
  std::cout << "dataset " << data.dir.string() << ": " << data.dataset.manifest.n_bags() << " bags, "
            << data.dataset.manifest.total_instances() << " instances\n";
  std::cout << "instances.bin fnv1a " << hex64(file_hash(data.dir / "instances.bin")) << "\n";
  return kOk;
}

int cmd_pretrain(const ConfigFlags& flags) {
  Experiment exp(load_config(flags), &std::cerr);
  exp.write_config();
  const SslMethod method = exp.config().ssl.method;
  if (!is_self_supervised(method))
    throw InvalidParameter("pretrain: ssl.method must be simclr, swav or dino (got " + std::string(to_string(method)) + ")");
  for (const auto& dir : exp.pretrain(method))
    std::cout << "encoder " << dir.string() << " fnv1a " << hex64(checkpoint_hash(dir)) << "\n";
  return kOk;
}

int cmd_train_mil(const ConfigFlags& flags) {
  Experiment exp(load_config(flags), &std::cerr);
  exp.write_config();
  print_summary(exp.train_mil(exp.config().ssl.method));
  return kOk;
}

int cmd_report(const ConfigFlags& flags, const std::vector<std::string>& methods) {
  const ExperimentConfig cfg = resolve(load_config(flags));
  std::vector<std::string> names = methods;
  if (names.empty()) names.emplace_back(to_string(cfg.ssl.method));
  for (const auto& name : names) {
    const SslMethod method = ssl_method_from_string(name);
    const fs::path dir = cfg.output_dir / std::string(to_string(method));
    std::vector<std::string> warnings;
    const std::string text = format_report(std::string(to_string(method)), collect_records(dir), &warnings);
    std::ofstream os(dir / "report.txt");
    if (!(os << text)) throw IoError("cannot write " + (dir / "report.txt").string());
    std::cout << text;
    for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  }
  return kOk;
}

struct EvalFlags {
  std::string run;
  std::string split = "test";
  bool allow_training_bags = false;
  std::string out;
};

int cmd_eval(const ConfigFlags& flags, const EvalFlags& ef) {
  Experiment exp(load_config(flags), &std::cerr);
  const fs::path run_dir = ef.run;
  const RunRecord rec = read_record(run_dir / "record.json");
  const Mlp encoder = encoder_from_checkpoint(read_checkpoint(rec.encoder_checkpoint));
  const MilModel model = mil_from_checkpoint(read_checkpoint(rec.mil_checkpoint));
  const Dataset& ds = exp.dataset().dataset;
  if (encoder.input_dim() != ds.manifest.feature_dim)
    throw ShapeMismatch("eval: encoder expects " + std::to_string(encoder.input_dim()) + " features, dataset has " +
                        std::to_string(ds.manifest.feature_dim));
  if (model.input_dim() != encoder.output_dim() || model.n_classes() != ds.manifest.n_classes)
    throw ShapeMismatch("eval: MIL checkpoint does not match the encoder or the dataset's classes");

  const auto folds = exp.folds();
  if (rec.fold >= folds.size()) throw InvalidParameter("eval: record fold outside the configured folds");
  const FoldSplit& split = folds[rec.fold];
  std::vector<std::size_t> bags;
  if (ef.split == "test") {
    bags = split.test;
  } else if (ef.split == "validation") {
    bags = split.validation;
  } else if (ef.split == "train") {
    bags = split.train;
  } else if (ef.split == "all") {
    bags.resize(ds.manifest.n_bags());
    for (std::size_t i = 0; i < bags.size(); ++i) bags[i] = i;
  } else {
    throw InvalidParameter("eval: --split must be test, validation, train or all");
  }
  std::sort(bags.begin(), bags.end());
  const bool touches_train = std::any_of(bags.begin(), bags.end(), [&](std::size_t b) {
    return std::binary_search(split.train.begin(), split.train.end(), b);
  });
  if (touches_train && !ef.allow_training_bags)
    throw InvalidParameter("eval: refusing to evaluate a checkpoint on bags it was trained on "
                           "(pass --allow-training-bags to override)");

  const fs::path out = ef.out.empty() ? run_dir / ("eval_" + ef.split) : fs::path(ef.out);
  const BagEvaluation eval = evaluate_bags(ds, bags, model, encoder);
  MetricsReport report = evaluate(eval.predictions);
  const fs::path truth_dir = exp.dataset().dir;
  if (fs::exists(truth_dir / "planted_truth")) {
    try {
      report.attention_rank_auc = attention_rank_auc(eval.attention, read_planted_truth(truth_dir).planted);
    } catch (const DegenerateInput& e) {
      report.warnings.push_back(e.what());
    }
  }
  write_exports(out, ds, eval, report);
  write_embeddings(out / "embeddings.csv", ds, bags, encoder);
  RunRecord summary = rec;
  summary.report = report;
  std::cout << format_report(rec.method, {summary});
  std::cout << "exports " << out.string() << "\n";
  return kOk;
}

int cmd_gradcheck(const GradcheckOptions& opts) {
  const GradcheckReport report = run_gradcheck(opts);
  std::cout << report.to_text();
  return report.passed() ? kOk : kNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-supervised pre-training and attention MIL on bags of instances"};
  app.require_subcommand(1);

  ConfigFlags flags;
  auto* generate = app.add_subcommand("generate", "write a synthetic dataset under the experiment directory");
  auto* pretrain = app.add_subcommand("pretrain", "self-supervised encoder pre-training (per fold by default)");
  auto* train = app.add_subcommand("train-mil", "k folds x runs MIL trainings, records and aggregate report");
  auto* eval = app.add_subcommand("eval", "evaluate one trained run and export predictions, curves and embeddings");
  auto* report = app.add_subcommand("report", "re-aggregate run records into report.txt");
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every analytic gradient");
  for (auto* cmd : {generate, pretrain, train, eval, report}) add_config_flags(cmd, flags);

  std::vector<std::string> report_methods;
  report->add_option("--method", report_methods, "methods to aggregate (default: ssl.method)");

  EvalFlags ef;
  eval->add_option("--run", ef.run, "run directory holding record.json")->required();
  eval->add_option("--split", ef.split, "bags to evaluate: test, validation, train or all");
  eval->add_flag("--allow-training-bags", ef.allow_training_bags, "permit bags from the run's training split");
  eval->add_option("--out", ef.out, "export directory (default: <run>/eval_<split>)");

  GradcheckOptions gopts;
  grad->add_option("--scope", gopts.scope, "components to check (nt_xent, swav, dino, mil)");
  grad->add_option("--shapes", gopts.shapes_per_component, "random shapes per component");
  grad->add_option("--seed", gopts.seed, "random seed");
  grad->add_option("--corrupt", gopts.corrupt, "test hook: perturb this component's analytic gradient");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    if (*generate) return cmd_generate(flags);
    if (*pretrain) return cmd_pretrain(flags);
    if (*train) return cmd_train_mil(flags);
    if (*eval) return cmd_eval(flags, ef);
    if (*report) return cmd_report(flags, report_methods);
    if (*grad) {
      for (const auto& s : gopts.scope)
        if (std::find(gradcheck_components().begin(), gradcheck_components().end(), s) == gradcheck_components().end())
          throw InvalidParameter("gradcheck: unknown component '" + s + "'");
      return cmd_gradcheck(gopts);
    }
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const TrainingDivergence& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumerical;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  }
  return kUsage;
}
