#include "ssmil/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "ssmil/error.hpp"
#include "ssmil/linalg.hpp"
#include "ssmil/mil.hpp"
#include "ssmil/nn.hpp"
#include "ssmil/ssl.hpp"

namespace ssmil {

bool GradcheckReport::passed() const {
  return std::all_of(entries.begin(), entries.end(), [](const GradcheckEntry& e) { return e.passed; });
}

std::string GradcheckReport::to_text() const {
  std::ostringstream os;
  for (const auto& e : entries) {
    os << (e.passed ? "PASS " : "FAIL ") << std::left << std::setw(8) << e.component << " shapes=" << e.shapes
       << " coords=" << e.coordinates << " kinks_skipped=" << e.skipped_kinks << " max_rel_error=" << std::scientific
       << std::setprecision(3) << e.max_rel_error << std::defaultfloat;
    if (!e.worst.empty()) os << " worst=" << e.worst;
    os << "  (" << e.covers << ")\n";
  }
  os << "gradcheck " << (passed() ? "passed" : "FAILED") << " in " << std::fixed << std::setprecision(2) << seconds
     << " s\n";
  return os.str();
}

const std::vector<std::string>& gradcheck_components() {
  static const std::vector<std::string> c = {"nt_xent", "swav", "dino", "mil"};
  return c;
}

double gradcheck_error(double analytic, double numeric, double rtol, double atol) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), atol / rtol});
  return std::abs(analytic - numeric) / scale;
}

namespace {

struct Eval {
  double value = 0.0;
  std::uint64_t pattern = 0;  // rectifier on/off pattern of every cached layer
};

struct Target {
  std::string name;
  std::span<double> values;
  std::vector<double> analytic;
};

void mix(std::uint64_t& h, std::uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
}

void hash_pattern(const Mlp& net, const MlpCache& cache, std::uint64_t& h) {
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    if (net.activation_of(l) != Activation::relu) continue;
    std::uint64_t bits = 0;
    std::size_t n = 0;
    for (double v : cache.outputs[l].values()) {
      bits = (bits << 1) | (v > 0.0 ? 1u : 0u);
      if (++n % 64 == 0) mix(h, bits);
    }
    mix(h, bits);
  }
}

std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(r, c);
  for (double& v : m.values()) v = n(rng);
  return m;
}

// Random perceptron with 1-3 layers, widths <= 12, and nonzero biases.
Mlp random_mlp(std::size_t in, std::size_t out, Activation hidden, Activation output, std::mt19937_64& rng) {
  MlpArch arch{{in}, hidden, output};
  const std::size_t layers = pick(rng, 1, 3);
  for (std::size_t l = 1; l < layers; ++l) arch.widths.push_back(pick(rng, 2, 12));
  arch.widths.push_back(out);
  Mlp net = init_mlp(arch, rng());
  std::normal_distribution<double> n(0.0, 0.1);
  for (auto& layer : net.layers)
    for (double& b : layer.bias.values()) b = n(rng);
  return net;
}

std::vector<Target> targets_for(Mlp& net, const Mlp& grads, const std::string& prefix) {
  std::vector<Target> out;
  auto p = params_of(net, prefix);
  const auto g = params_of(grads, prefix);
  for (std::size_t i = 0; i < p.size(); ++i)
    out.push_back({p[i].name, p[i].values, {g[i].values.begin(), g[i].values.end()}});
  return out;
}

Target matrix_target(const std::string& name, Matrix& m, const Matrix& grad) {
  return {name, m.values(), {grad.values().begin(), grad.values().end()}};
}

class Checker {
 public:
  Checker(const GradcheckOptions& o, GradcheckEntry& e, std::mt19937_64& rng) : o_(o), e_(e), rng_(rng) {}

  void run(const std::function<Eval()>& f, std::vector<Target> targets) {
    if (o_.corrupt == e_.component)
      for (auto& t : targets)
        for (double& a : t.analytic) a += 0.01 * std::abs(a) + 1e-3;
    const Eval base = f();
    for (auto& t : targets) {
      std::vector<std::size_t> coords(t.values.size());
      std::iota(coords.begin(), coords.end(), 0);
      if (coords.size() > o_.max_coords_per_tensor) {
        std::shuffle(coords.begin(), coords.end(), rng_);
        coords.resize(o_.max_coords_per_tensor);
      }
      for (std::size_t i : coords) {
        const double orig = t.values[i];
        t.values[i] = orig + o_.step;
        const Eval up = f();
        t.values[i] = orig - o_.step;
        const Eval down = f();
        t.values[i] = orig;
        if (up.pattern != base.pattern || down.pattern != base.pattern) {
          ++e_.skipped_kinks;
          continue;
        }
        const double numeric = (up.value - down.value) / (2.0 * o_.step);
        const double err = gradcheck_error(t.analytic[i], numeric, o_.rtol, o_.atol);
        ++e_.coordinates;
        if (!(err <= e_.max_rel_error)) {
          e_.max_rel_error = std::isfinite(err) ? err : INFINITY;
          e_.worst = t.name;
        }
      }
    }
  }

 private:
  const GradcheckOptions& o_;
  GradcheckEntry& e_;
  std::mt19937_64& rng_;
};

void check_nt_xent(Checker& ck, std::mt19937_64& rng) {
  const std::size_t n = pick(rng, 1, 5), din = pick(rng, 2, 8), d = pick(rng, 2, 8);
  const double tau = uniform(rng, 0.1, 1.0);
  Mlp net = random_mlp(din, d, Activation::relu, Activation::identity, rng);
  const Matrix x1 = random_matrix(n, din, rng), x2 = random_matrix(n, din, rng);

  auto eval_net = [&] {
    MlpCache c1, c2;
    const Matrix z1 = forward(net, x1, &c1), z2 = forward(net, x2, &c2);
    Eval e{nt_xent_loss({z1, z2}, tau).value, 0};
    hash_pattern(net, c1, e.pattern);
    hash_pattern(net, c2, e.pattern);
    return e;
  };
  MlpCache c1, c2;
  Matrix z1 = forward(net, x1, &c1), z2 = forward(net, x2, &c2);
  const LossResult r = nt_xent_loss({z1, z2}, tau);
  Mlp g = backward(net, c1, r.grad("z1"), false).params;
  const Mlp g2 = backward(net, c2, r.grad("z2"), false).params;
  auto gp = params_of(g, "encoder");
  const auto g2p = params_of(g2, "encoder");
  for (std::size_t i = 0; i < gp.size(); ++i)
    for (std::size_t j = 0; j < gp[i].values.size(); ++j) gp[i].values[j] += g2p[i].values[j];
  ck.run(eval_net, targets_for(net, g, "encoder"));

  ck.run([&] { return Eval{nt_xent_loss({z1, z2}, tau).value, 0}; },
         {matrix_target("z1", z1, r.grad("z1")), matrix_target("z2", z2, r.grad("z2"))});
}

void check_swav(Checker& ck, std::mt19937_64& rng) {
  const std::size_t n = pick(rng, 1, 5), din = pick(rng, 2, 8), d = pick(rng, 2, 8), j = pick(rng, 2, 6);
  const double tau = uniform(rng, 0.1, 1.0);
  Mlp net = random_mlp(din, d, Activation::relu, Activation::identity, rng);
  PrototypeBank bank = PrototypeBank::random(j, d, rng());
  const Matrix x1 = random_matrix(n, din, rng), x2 = random_matrix(n, din, rng);
  Matrix z1 = forward(net, x1), z2 = forward(net, x2);
  // Codes are constants of the loss.
  const Matrix q1 = sinkhorn_codes(matmul_nt(l2_normalize_rows(z1), bank.c())).q;
  const Matrix q2 = sinkhorn_codes(matmul_nt(l2_normalize_rows(z2), bank.c())).q;

  auto eval_net = [&] {
    MlpCache c1, c2;
    const Matrix a = forward(net, x1, &c1), b = forward(net, x2, &c2);
    Eval e{swav_loss_with_codes({a, b}, bank, q1, q2, tau).value, 0};
    hash_pattern(net, c1, e.pattern);
    hash_pattern(net, c2, e.pattern);
    return e;
  };
  MlpCache c1, c2;
  forward(net, x1, &c1);
  forward(net, x2, &c2);
  const LossResult r = swav_loss_with_codes({z1, z2}, bank, q1, q2, tau);
  Mlp g = backward(net, c1, r.grad("z1"), false).params;
  const Mlp g2 = backward(net, c2, r.grad("z2"), false).params;
  auto gp = params_of(g, "encoder");
  const auto g2p = params_of(g2, "encoder");
  for (std::size_t i = 0; i < gp.size(); ++i)
    for (std::size_t k = 0; k < gp[i].values.size(); ++k) gp[i].values[k] += g2p[i].values[k];
  auto targets = targets_for(net, g, "encoder");
  targets.push_back(matrix_target("prototypes", bank.mutable_c(), r.grad("prototypes")));
  ck.run(eval_net, std::move(targets));

  ck.run([&] { return Eval{swav_loss_with_codes({z1, z2}, bank, q1, q2, tau).value, 0}; },
         {matrix_target("z1", z1, r.grad("z1")), matrix_target("z2", z2, r.grad("z2"))});
}

void check_dino(Checker& ck, std::mt19937_64& rng) {
  const std::size_t n = pick(rng, 1, 5), din = pick(rng, 2, 8), k = pick(rng, 2, 16);
  TeacherState state;
  state.tau_s = uniform(rng, 0.1, 0.5);
  state.tau_t = state.tau_s * uniform(rng, 0.3, 0.9);
  state.center = Vector(k);
  std::normal_distribution<double> nd(0.0, 0.5);
  for (double& c : state.center.values()) c = nd(rng);
  Mlp net = random_mlp(din, k, Activation::relu, Activation::identity, rng);
  const Matrix x = random_matrix(n, din, rng);
  const Matrix teacher = random_matrix(n, k, rng, 2.0);

  auto eval_net = [&] {
    MlpCache c;
    const Matrix s = forward(net, x, &c);
    Eval e{dino_loss(s, teacher, state).value, 0};
    hash_pattern(net, c, e.pattern);
    return e;
  };
  MlpCache c;
  Matrix s = forward(net, x, &c);
  const LossResult r = dino_loss(s, teacher, state);
  const Mlp g = backward(net, c, r.grad("student_logits"), false).params;
  ck.run(eval_net, targets_for(net, g, "student"));
  ck.run([&] { return Eval{dino_loss(s, teacher, state).value, 0}; },
         {matrix_target("student_logits", s, r.grad("student_logits"))});
}

void check_mil(Checker& ck, std::mt19937_64& rng) {
  const std::size_t n = pick(rng, 1, 6), din = pick(rng, 2, 8), k = pick(rng, 3, 12);
  MilArch arch{k, pick(rng, 2, k - 1), pick(rng, 2, 8), pick(rng, 2, 5)};
  MilModel model = init_mil(arch, rng());
  std::normal_distribution<double> nd(0.0, 0.1);
  for (auto* net : {&model.reducer, &model.attention})
    for (auto& layer : net->layers)
      for (double& b : layer.bias.values()) b = nd(rng);
  for (double& b : model.classifier_bias.values()) b = nd(rng);
  for (std::size_t c = 0; c < k; ++c) {
    model.scaler.mean[c] = nd(rng);
    model.scaler.inv_std[c] = uniform(rng, 0.5, 2.0);
  }
  Mlp encoder = random_mlp(din, k, Activation::relu, Activation::relu, rng);
  const Matrix x = random_matrix(n, din, rng);
  const std::size_t label = pick(rng, 0, arch.n_classes - 1);

  auto eval = [&] {
    MlpCache ce, cr;
    const Matrix z = forward(encoder, x, &ce);
    forward(model.reducer, model.scaler.apply(z), &cr);
    Eval e{mil_forward_loss(x, label, model, &encoder, true).value, 0};
    hash_pattern(encoder, ce, e.pattern);
    hash_pattern(model.reducer, cr, e.pattern);
    return e;
  };
  const MilLossResult r = mil_forward_loss(x, label, model, &encoder, true);
  std::vector<Target> targets;
  auto p = mil_params(model);
  const auto g = mil_params(r.grads);
  for (std::size_t i = 0; i < p.size(); ++i)
    targets.push_back({p[i].name, p[i].values, {g[i].values.begin(), g[i].values.end()}});
  for (auto& t : targets_for(encoder, *r.encoder_grads, "encoder")) targets.push_back(std::move(t));
  ck.run(eval, std::move(targets));
}

}  // namespace

GradcheckReport run_gradcheck(const GradcheckOptions& options) {
  if (!(options.step > 0.0) || !(options.rtol > 0.0) || options.shapes_per_component == 0)
    throw InvalidParameter("gradcheck: step, rtol and shape count must be positive");
  for (const auto& s : options.scope)
    if (std::find(gradcheck_components().begin(), gradcheck_components().end(), s) == gradcheck_components().end())
      throw InvalidParameter("gradcheck: unknown component '" + s + "'");

  const auto start = std::chrono::steady_clock::now();
  static const std::map<std::string, std::pair<const char*, void (*)(Checker&, std::mt19937_64&)>> suites = {
      {"nt_xent", {"contrastive loss, normalization, encoder", check_nt_xent}},
      {"swav", {"swapped prediction with frozen codes, prototypes, encoder", check_swav}},
      {"dino", {"distillation cross entropy, student network", check_dino}},
      {"mil", {"classifier, pooling, attention, reducer, scaler, encoder", check_mil}},
  };
  GradcheckReport report;
  std::mt19937_64 rng(options.seed);
  for (const auto& name : gradcheck_components()) {
    if (!options.scope.empty() && std::find(options.scope.begin(), options.scope.end(), name) == options.scope.end())
      continue;
    const auto& [covers, fn] = suites.at(name);
    GradcheckEntry e{name, covers};
    Checker ck(options, e, rng);
    for (std::size_t s = 0; s < options.shapes_per_component; ++s) {
      fn(ck, rng);
      ++e.shapes;
    }
    e.passed = e.max_rel_error < options.rtol && e.coordinates > 0;
    report.entries.push_back(std::move(e));
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace ssmil
