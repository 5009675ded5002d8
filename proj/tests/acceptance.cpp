// Acceptance suite: one PASS/FAIL line per criterion. Criteria 5-8 run the
// full default benchmark twice (about twenty minutes on one core).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "metric_oracles.hpp"
#include "ssmil/checkpoint.hpp"
#include "ssmil/gradcheck.hpp"
#include "ssmil/linalg.hpp"
#include "ssmil/metrics.hpp"
#include "ssmil/mil.hpp"
#include "ssmil/pipeline.hpp"
#include "ssmil/ssl.hpp"
#include "test_util.hpp"

using namespace ssmil;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;
};

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

std::string num(double v, int digits = 4) {
  std::ostringstream os;
  os << std::setprecision(digits) << v;
  return os.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------

Verdict gradients() {
  const double start = cpu_seconds();
  const GradcheckReport report = run_gradcheck(GradcheckOptions{});
  const double cpu = cpu_seconds() - start;
  Verdict v{report.passed() && cpu < 60.0, ""};
  for (const auto& e : report.entries) {
    v.pass = v.pass && e.shapes >= 20 && e.max_rel_error < 1e-4;
    v.detail += e.component + " shapes=" + std::to_string(e.shapes) + " err=" + num(e.max_rel_error, 3) + "; ";
  }
  v.pass = v.pass && report.entries.size() == gradcheck_components().size();
  v.detail += "cpu " + num(cpu, 3) + " s";
  return v;
}

Verdict sinkhorn() {
  // Scores are cosines between unit embeddings and unit prototypes at the
  // default prototype width, the regime the codes are computed in.
  std::mt19937_64 rng(20);
  std::uniform_int_distribution<std::size_t> n_dist(1, 32), j_dist(2, 16);
  double worst_final = 0.0;
  std::size_t monotone_breaks = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = n_dist(rng), j = j_dist(rng);
    const Matrix s = matmul_nt(l2_normalize_rows(test::random_matrix(n, 64, rng)),
                               l2_normalize_rows(test::random_matrix(j, 64, rng)));
    double previous = std::numeric_limits<double>::infinity();
    for (std::size_t iters = 1; iters <= 100; ++iters) {
      const double viol = marginal_violation(sinkhorn_codes(s, 0.05, iters).q);
      if (viol > previous + 1e-12) ++monotone_breaks;
      previous = viol;
    }
    worst_final = std::max(worst_final, previous);
  }
  return {worst_final < 1e-6 && monotone_breaks == 0,
          "worst marginal violation at 100 iters " + num(worst_final, 3) + ", monotonicity breaks " +
              std::to_string(monotone_breaks)};
}

Verdict metric_oracles() {
  std::mt19937_64 rng(30);
  std::uniform_int_distribution<std::size_t> n_dist(4, 30), c_dist(2, 5);
  double worst = 0.0;
  std::size_t confusion_mismatch = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t c = c_dist(rng);
    const PredictionSet set = oracle::random_set(rng, std::max(n_dist(rng), c + 1), c);
    worst = std::max(worst, std::abs(macro_f1(set) - oracle::naive_macro_f1(set)));
    worst = std::max(worst, std::abs(roc_auc_macro(set) - oracle::naive_macro(set, oracle::pair_auc, true)));
    worst = std::max(worst, std::abs(pr_auc_macro(set) - oracle::naive_macro(set, oracle::sweep_ap, false)));
    confusion_mismatch += confusion_matrix(set).counts != oracle::naive_confusion(set).counts;
  }
  return {worst <= 1e-12 && confusion_mismatch == 0,
          "max deviation " + num(worst, 3) + ", confusion mismatches " + std::to_string(confusion_mismatch)};
}

Verdict closed_forms() {
  Verdict v;
  const auto check = [&](const std::string& name, double got, double want, double tol) {
    const double err = std::abs(got - want);
    v.pass = v.pass && err <= tol;
    v.detail += name + " err=" + num(err, 3) + "; ";
  };
  const Matrix one = Matrix::from_rows({{0.3, -1.2, 0.5}});
  check("nt_xent N=1", nt_xent_loss({one, one}, 0.1).value, 0.0, 1e-12);
  const Matrix a = Matrix::from_rows({{1, 0, 0, 0}, {0, 1, 0, 0}});
  const Matrix b = Matrix::from_rows({{0, 0, 1, 0}, {0, 0, 0, 1}});
  check("nt_xent orthogonal", nt_xent_loss({a, b}, 1.0).value, std::log(3.0), 1e-9);

  TeacherState st;
  st.center = Vector(2, 0.0);
  st.tau_s = 0.1;
  st.tau_t = 0.04;
  const Matrix eq = Matrix::from_rows({{0.0, 0.0}});
  check("dino equal logits", dino_loss(eq, eq, st).value, std::log(2.0), 1e-12);

  MilModel m = init_mil({.input_dim = 8, .reduced_dim = 4, .attention_hidden = 6, .n_classes = 5}, 3);
  std::fill(m.classifier_weight.values().begin(), m.classifier_weight.values().end(), 0.0);
  std::mt19937_64 rng(40);
  check("mil uniform logits", mil_forward_loss(test::random_matrix(7, 8, rng), 2, m).value, std::log(5.0), 1e-12);
  return v;
}

Verdict properties() {
  std::mt19937_64 rng(90);
  double perm_err = 0.0, dup_err = 0.0, entropy_drop = 0.0, ema_err = 0.0, roc_err = 0.0;
  const MilModel model = init_mil({.input_dim = 12, .reduced_dim = 6, .attention_hidden = 8, .n_classes = 4}, 9);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + trial % 25;
    const Matrix x = test::random_matrix(n, 12, rng, 2.0);
    const BagPrediction base = predict_bag(x, model);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0u);
    std::shuffle(order.begin(), order.end(), rng);
    Matrix shuffled(n, 12), doubled(2 * n, 12);
    for (std::size_t i = 0; i < n; ++i) {
      std::ranges::copy(x.row(order[i]), shuffled.row(i).begin());
      std::ranges::copy(x.row(i), doubled.row(2 * i).begin());
      std::ranges::copy(x.row(i), doubled.row(2 * i + 1).begin());
    }
    const BagPrediction p = predict_bag(shuffled, model), d = predict_bag(doubled, model);
    for (std::size_t c = 0; c < 4; ++c) {
      perm_err = std::max(perm_err, std::abs(p.probabilities[c] - base.probabilities[c]));
      dup_err = std::max(dup_err, std::abs(d.probabilities[c] - base.probabilities[c]));
    }
  }
  for (int trial = 0; trial < 200; ++trial) {
    const Matrix logits = test::random_matrix(1, 10, rng, 3.0);
    double previous = -1.0;
    for (double tau = 0.01; tau < 50.0; tau *= 1.25) {
      const double h = entropy(softmax_rows(logits, tau).row(0));
      entropy_drop = std::max(entropy_drop, previous - h);
      previous = h;
    }
  }
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_real_distribution<double> mom(0.5, 0.999);
    const double m = mom(rng);
    const Vector s = test::random_vector(6, rng), t0 = test::random_vector(6, rng);
    Vector t = t0;
    const ParamList teacher{{"w", {6}, t.values()}};
    const ConstParamList student{{"w", {6}, s.values()}};
    for (int k = 1; k <= 30; ++k) {
      ema_update(teacher, student, m);
      for (std::size_t i = 0; i < 6; ++i)
        ema_err = std::max(ema_err, std::abs(t[i] - (s[i] + std::pow(m, k) * (t0[i] - s[i]))));
    }
  }
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> s(20), u(20);
    std::vector<std::uint8_t> pos(20);
    std::normal_distribution<double> g(0.0, 1.0);
    for (std::size_t i = 0; i < 20; ++i) {
      s[i] = std::round(4.0 * g(rng)) / 4.0;
      u[i] = std::atan(s[i]) * 5.0 - 2.0;
      pos[i] = i < 7;
    }
    std::shuffle(pos.begin(), pos.end(), rng);
    roc_err = std::max(roc_err, std::abs(binary_roc_auc(s, pos) - binary_roc_auc(u, pos)));
  }
  return {perm_err <= 1e-9 && dup_err <= 1e-9 && entropy_drop <= 1e-12 && ema_err <= 1e-12 && roc_err <= 1e-12,
          "permutation " + num(perm_err, 3) + ", duplication " + num(dup_err, 3) + ", entropy drop " +
              num(entropy_drop, 3) + ", EMA " + num(ema_err, 3) + ", ROC transform " + num(roc_err, 3)};
}

// ---------------------------------------------------------------------------
// Benchmark

struct MethodRun {
  MethodOutcome outcome;
  double cpu = 0.0;
  double wall = 0.0;
};

const std::vector<SslMethod> kSsl{SslMethod::simclr, SslMethod::swav, SslMethod::dino};

std::map<SslMethod, MethodRun> benchmark(const fs::path& out, const std::vector<SslMethod>& methods) {
  ConfigMap map;
  map.set("output.dir", out.string());
  Experiment exp(map);
  exp.write_config();
  exp.dataset();
  std::map<SslMethod, MethodRun> runs;
  for (SslMethod m : methods) {
    std::cerr << "[acceptance] " << to_string(m) << " in " << out.string() << "\n";
    const double c0 = cpu_seconds();
    const auto w0 = std::chrono::steady_clock::now();
    if (is_self_supervised(m)) exp.pretrain(m);
    MethodRun r;
    r.outcome = exp.train_mil(m);
    r.cpu = cpu_seconds() - c0;
    r.wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - w0).count();
    runs[m] = std::move(r);
  }
  return runs;
}

double mean_of(const MethodRun& r, const std::string& metric) { return r.outcome.summary.at(metric).mean; }

void report(int id, const std::string& what, const Verdict& v, int& failures) {
  std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << id << ": " << what << " | " << v.detail << std::endl;
  failures += v.pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string work = (fs::temp_directory_path() / "ssmil_acceptance").string();
  std::vector<int> only;
  app.add_option("--work-dir", work, "scratch directory for the benchmark experiments");
  app.add_option("--only", only, "run only these criteria");
  CLI11_PARSE(app, argc, argv);
  const auto wanted = [&](int id) { return only.empty() || std::ranges::count(only, id) > 0; };

  int failures = 0;
  if (wanted(1)) report(1, "gradcheck, >= 20 shapes per component, rel. error < 1e-4, < 60 s CPU", gradients(), failures);
  if (wanted(2)) report(2, "Sinkhorn marginals within 1e-6 at 100 iterations, non-increasing violation", sinkhorn(), failures);
  if (wanted(3)) report(3, "metrics equal brute-force oracles on 200 random sets to 1e-12", metric_oracles(), failures);
  if (wanted(4)) report(4, "closed-form loss values", closed_forms(), failures);

  if (wanted(5) || wanted(6) || wanted(7) || wanted(8)) {
    const fs::path first = fs::path(work) / "run_a", second = fs::path(work) / "run_b";
    fs::remove_all(first);
    fs::remove_all(second);
    std::vector<SslMethod> methods = kSsl;
    if (wanted(6)) {
      methods.push_back(SslMethod::none_random);
      methods.push_back(SslMethod::none_supervised_proxy);
    }
    const auto runs = benchmark(first, methods);

    if (wanted(5)) {
      Verdict v;
      double cpu = 0.0, wall = 0.0;
      for (SslMethod m : kSsl) {
        const MethodRun& r = runs.at(m);
        const double f1 = mean_of(r, "f1_macro");
        v.pass = v.pass && f1 >= 0.90 && r.outcome.records.size() == 15;
        cpu += r.cpu;
        wall += r.wall;
        v.detail += std::string(to_string(m)) + " F1 " + num(f1) + " +- " + num(r.outcome.summary.at("f1_macro").sd, 3) +
                    " (" + std::to_string(r.outcome.records.size()) + " sets); ";
      }
      v.pass = v.pass && cpu < 600.0;
      v.detail += "cpu " + num(cpu, 4) + " s, wall " + num(wall, 4) + " s";
      report(5, "default benchmark, each SSL encoder macro F1 >= 0.90, < 10 min CPU", v, failures);
    }
    if (wanted(6)) {
      const double random_f1 = mean_of(runs.at(SslMethod::none_random), "f1_macro");
      const double proxy_f1 = mean_of(runs.at(SslMethod::none_supervised_proxy), "f1_macro");
      Verdict v;
      v.detail = "random " + num(random_f1) + ", proxy " + num(proxy_f1) + "; ";
      for (SslMethod m : kSsl) {
        const double f1 = mean_of(runs.at(m), "f1_macro");
        const bool above_random = f1 >= random_f1 + 0.05;
        const bool near_proxy = std::abs(f1 - proxy_f1) <= 0.05;
        v.pass = v.pass && above_random && near_proxy;
        v.detail += std::string(to_string(m)) + " " + num(f1) + " (vs random " + num(f1 - random_f1, 3) +
                    ", vs proxy " + num(f1 - proxy_f1, 3) + "); ";
      }
      report(6, "SSL F1 >= random + 0.05 and within 0.05 of the supervised proxy", v, failures);
    }
    if (wanted(7)) {
      Verdict v;
      for (SslMethod m : kSsl) {
        const auto& s = runs.at(m).outcome.summary;
        const bool present = s.count("attention_rank_auc") > 0;
        const double auc = present ? s.at("attention_rank_auc").mean : 0.0;
        v.pass = v.pass && present && auc >= 0.80;
        v.detail += std::string(to_string(m)) + " " + num(auc) + "; ";
      }
      report(7, "attention rank AUC of planted instances >= 0.80", v, failures);
    }
    if (wanted(8)) {
      const auto again = benchmark(second, kSsl);
      Verdict v;
      std::size_t frozen_checked = 0;
      for (SslMethod m : kSsl) {
        const std::string name(to_string(m));
        const bool same = slurp(first / name / "report.txt") == slurp(second / name / "report.txt");
        v.pass = v.pass && same && !slurp(first / name / "report.txt").empty();
        v.detail += name + (same ? " identical; " : " DIFFERS; ");
        for (const auto* run_set : {&runs.at(m), &again.at(m)})
          for (const RunRecord& r : run_set->outcome.records) {
            const bool frozen = r.encoder_hash_before == r.encoder_hash_after &&
                                hex64(checkpoint_hash(r.encoder_checkpoint)) == r.encoder_hash_before;
            v.pass = v.pass && frozen;
            ++frozen_checked;
          }
      }
      v.detail += "encoder hashes unchanged in " + std::to_string(frozen_checked) + " frozen runs checked";
      report(8, "repeated runs give byte-identical reports; frozen encoders unchanged", v, failures);
    }
  }
  if (wanted(9)) report(9, "property trials (permutation, duplication, entropy, EMA, ROC transform)", properties(), failures);

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criterion(s) failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
