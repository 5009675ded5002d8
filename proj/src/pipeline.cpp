#include "ssmil/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "ssmil/checkpoint.hpp"
#include "ssmil/error.hpp"
#include "ssmil/optim.hpp"
#include "ssmil/ssl.hpp"

namespace ssmil {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void add_into(Mlp& acc, const Mlp& g) {
  for (std::size_t l = 0; l < acc.layers.size(); ++l) {
    acc.layers[l].weight += g.layers[l].weight;
    auto b = acc.layers[l].bias.values();
    auto gb = g.layers[l].bias.values();
    for (std::size_t i = 0; i < b.size(); ++i) b[i] += gb[i];
  }
}

Matrix gather_rows(const Matrix& x, std::span<const std::size_t> idx) {
  Matrix out(idx.size(), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(x.row(idx[i]).begin(), x.cols(), out.row(i).begin());
  return out;
}

Matrix vstack(const std::vector<Matrix>& parts) {
  std::size_t rows = 0;
  for (const auto& p : parts) rows += p.rows();
  Matrix out(rows, parts.front().cols());
  std::size_t r = 0;
  for (const auto& p : parts) {
    std::copy(p.values().begin(), p.values().end(), out.data() + r * out.cols());
    r += p.rows();
  }
  return out;
}

// Subtracts the batch mean from every row. The same map takes the gradient
// back, since it is an orthogonal projection.
Matrix batch_center(Matrix m) {
  const Vector mean = column_mean(m);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) row[c] -= mean[c];
  }
  return m;
}

MlpArch head_arch(std::size_t in, const std::vector<std::size_t>& widths) {
  MlpArch a{{in}, Activation::relu, Activation::identity};
  a.widths.insert(a.widths.end(), widths.begin(), widths.end());
  return a;
}

AugmentationSpec view_spec(std::size_t dim, double crop, double sigma, bool translate, double flip_p = 0.5) {
  AugmentationSpec a;
  if (grid_side(dim) > 0) {
    if (flip_p > 0.0) a.transforms = {HorizontalFlip{flip_p}, VerticalFlip{flip_p}, Rotate90{flip_p}};
    if (translate) a.transforms.push_back(RandomShift{});
    if (crop < 1.0) a.transforms.push_back(CropMask{crop >= 0.75 ? CropView::global_view : CropView::local_view, crop});
  }
  if (sigma > 0.0) a.transforms.push_back(GaussianNoise{sigma});
  return a;
}

void append(ConstParamList& dst, const ConstParamList& src) { dst.insert(dst.end(), src.begin(), src.end()); }
void append(ParamList& dst, const ParamList& src) { dst.insert(dst.end(), src.begin(), src.end()); }

// Shuffled mini-batches of row indices for one epoch.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t per_epoch, std::size_t batch,
                                                    std::mt19937_64& rng) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  const std::size_t steps = std::max<std::size_t>(1, per_epoch / batch);
  for (std::size_t s = 0; s < steps; ++s)
    out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(s * batch),
                     perm.begin() + static_cast<std::ptrdiff_t>(std::min(n, (s + 1) * batch)));
  return out;
}

struct SslLoop {
  std::size_t per_epoch;
  std::size_t batch;
  std::size_t steps_per_epoch;
  LrSchedule schedule;
};

SslLoop make_loop(std::size_t n, const SslSettings& ssl, double lr, std::size_t epochs) {
  SslLoop l;
  l.per_epoch = ssl.instances_per_epoch ? std::min(ssl.instances_per_epoch, n) : n;
  l.batch = std::min(ssl.batch_size, l.per_epoch);
  l.steps_per_epoch = std::max<std::size_t>(1, l.per_epoch / l.batch);
  l.schedule = {lr, epochs * l.steps_per_epoch, std::min(ssl.warmup_epochs, epochs) * l.steps_per_epoch,
                ScheduleKind::cosine};
  return l;
}

void check_finite(double loss, const char* method, std::size_t epoch) {
  if (!std::isfinite(loss))
    throw TrainingDivergence(std::string(method) + ": non-finite loss in epoch " + std::to_string(epoch) +
                             (epoch > 0 ? " (last finite epoch " + std::to_string(epoch - 1) + ")" : ""));
}

void log_epoch(std::ostream* log, const char* method, std::size_t epoch, std::size_t epochs, double loss) {
  if (log && (epoch % 10 == 0 || epoch + 1 == epochs))
    *log << "  " << method << " epoch " << epoch + 1 << "/" << epochs << " loss " << loss << "\n";
}

PretrainResult pretrain_simclr(const Matrix& x, Mlp enc, const SslSettings& ssl, std::uint64_t seed,
                               std::ostream* log) {
  std::mt19937_64 rng(seed);
  Mlp head = init_mlp(head_arch(enc.output_dim(), ssl.simclr_head), seed + 1);
  const SslLoop loop = make_loop(x.rows(), ssl, ssl.simclr_lr, ssl.epochs);
  const AugmentationSpec spec = view_spec(x.cols(), ssl.global_crop, ssl.noise_sigma, ssl.translate, ssl.flip_probability);

  ParamList params = params_of(enc, "encoder");
  append(params, params_of(head, "head"));
  Optimizer opt(ssl.simclr_optimizer, ssmil::as_const(params));
  PretrainResult out;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < ssl.epochs; ++epoch) {
    double total = 0.0;
    const auto batches = epoch_batches(x.rows(), loop.per_epoch, loop.batch, rng);
    for (const auto& idx : batches) {
      const Matrix xb = gather_rows(x, idx);
      const Matrix v1 = apply_augmentations(spec, xb, rng);
      const Matrix v2 = apply_augmentations(spec, xb, rng);
      MlpCache ce1, ch1, ce2, ch2;
      const Matrix z1 = batch_center(forward(head, forward(enc, v1, &ce1), &ch1));
      const Matrix z2 = batch_center(forward(head, forward(enc, v2, &ce2), &ch2));
      const LossResult r = nt_xent_loss({z1, z2}, ssl.simclr_tau);
      check_finite(r.value, "simclr", epoch);
      total += r.value;
      MlpGrads gh = backward(head, ch1, batch_center(r.grad("z1")));
      const MlpGrads gh2 = backward(head, ch2, batch_center(r.grad("z2")));
      Mlp ge = backward(enc, ce1, gh.input, false).params;
      add_into(ge, backward(enc, ce2, gh2.input, false).params);
      add_into(gh.params, gh2.params);
      ConstParamList grads = params_of(std::as_const(ge), "encoder");
      append(grads, params_of(std::as_const(gh.params), "head"));
      opt.step(params, grads, lr_at(loop.schedule, step++));
    }
    out.epoch_loss.push_back(total / static_cast<double>(batches.size()));
    log_epoch(log, "simclr", epoch, ssl.epochs, out.epoch_loss.back());
  }
  out.encoder = std::move(enc);
  return out;
}

PretrainResult pretrain_swav(const Matrix& x, Mlp enc, const SslSettings& ssl, std::uint64_t seed,
                             std::ostream* log) {
  std::mt19937_64 rng(seed);
  Mlp head = init_mlp(head_arch(enc.output_dim(), ssl.swav_head), seed + 1);
  PrototypeBank bank = PrototypeBank::random(ssl.swav_prototypes, head.output_dim(), seed + 2);
  const std::size_t n_views = ssl.n_global + ssl.swav_local;
  const ViewPairs pairs = cross_view_pairs(ssl.n_global, n_views);
  const SwavOptions opts{ssl.swav_tau, ssl.swav_epsilon, ssl.swav_iters};
  const SslLoop loop = make_loop(x.rows(), ssl, ssl.swav_lr, ssl.epochs);
  const AugmentationSpec global = view_spec(x.cols(), ssl.global_crop, ssl.noise_sigma, ssl.translate, ssl.flip_probability);
  const AugmentationSpec local = view_spec(x.cols(), ssl.local_crop, ssl.noise_sigma, ssl.translate, ssl.flip_probability);

  ParamList params = params_of(enc, "encoder");
  append(params, params_of(head, "head"));
  params.push_back({"prototypes", {bank.count(), bank.dim()}, bank.mutable_c().values()});
  Optimizer opt(ssl.swav_optimizer, ssmil::as_const(params));
  PretrainResult out;
  if (loop.batch == 1) out.warnings.push_back("swav: batch of one makes balanced assignment meaningless");
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < ssl.epochs; ++epoch) {
    double total = 0.0;
    const auto batches = epoch_batches(x.rows(), loop.per_epoch, loop.batch, rng);
    for (const auto& idx : batches) {
      const Matrix xb = gather_rows(x, idx);
      std::vector<MlpCache> ce(n_views), ch(n_views);
      std::vector<Matrix> z(n_views);
      for (std::size_t v = 0; v < n_views; ++v) {
        const Matrix view = apply_augmentations(v < ssl.n_global ? global : local, xb, rng);
        z[v] = batch_center(forward(head, forward(enc, view, &ce[v]), &ch[v]));
      }
      LossResult r = swav_multicrop_loss(z, bank, pairs, opts);
      check_finite(r.value, "swav", epoch);
      total += r.value;
      Mlp ge = zeros_like(enc), gh = zeros_like(head);
      for (std::size_t v = 0; v < n_views; ++v) {
        const MlpGrads g = backward(head, ch[v], batch_center(r.grad("view" + std::to_string(v))));
        add_into(gh, g.params);
        add_into(ge, backward(enc, ce[v], g.input, false).params);
      }
      Matrix& gc = r.grads.at("prototypes");
      if (epoch < ssl.swav_freeze_prototypes_epochs) gc.fill(0.0);
      ConstParamList grads = params_of(std::as_const(ge), "encoder");
      append(grads, params_of(std::as_const(gh), "head"));
      grads.push_back({"prototypes", {gc.rows(), gc.cols()}, gc.values()});
      opt.step(params, grads, lr_at(loop.schedule, step++));
      bank.renormalize();
    }
    out.epoch_loss.push_back(total / static_cast<double>(batches.size()));
    log_epoch(log, "swav", epoch, ssl.epochs, out.epoch_loss.back());
  }
  out.encoder = std::move(enc);
  return out;
}

PretrainResult pretrain_dino(const Matrix& x, Mlp enc, const SslSettings& ssl, std::uint64_t seed,
                             std::ostream* log) {
  std::mt19937_64 rng(seed);
  Mlp head = init_mlp(head_arch(enc.output_dim(), ssl.dino_head), seed + 1);
  const std::size_t n_views = ssl.n_global + ssl.n_local;
  const ViewPairs pairs = cross_view_pairs(ssl.n_global, n_views);
  const SslLoop loop = make_loop(x.rows(), ssl, ssl.dino_lr, ssl.epochs);
  const AugmentationSpec global = view_spec(x.cols(), ssl.global_crop, ssl.noise_sigma, ssl.translate, ssl.flip_probability);
  const AugmentationSpec local = view_spec(x.cols(), ssl.local_crop, ssl.noise_sigma, ssl.translate, ssl.flip_probability);

  TeacherState state;
  state.networks = {enc, head};
  state.center = Vector(head.output_dim());
  state.tau_s = ssl.dino_tau_s;
  state.tau_t = ssl.dino_tau_t_start;
  state.ema_momentum = ssl.dino_ema;
  state.center_momentum = ssl.dino_center_momentum;
  state.validate();

  ParamList params = params_of(enc, "encoder");
  append(params, params_of(head, "head"));
  ParamList teacher = params_of(state.networks[0], "encoder");
  append(teacher, params_of(state.networks[1], "head"));
  Optimizer opt(ssl.dino_optimizer, ssmil::as_const(params));
  PretrainResult out;
  if (loop.batch == 1) out.warnings.push_back("dino: batch of one makes centering meaningless");
  const std::size_t total_steps = ssl.epochs * loop.steps_per_epoch;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < ssl.epochs; ++epoch) {
    const std::size_t warm = ssl.dino_tau_t_warmup_epochs;
    state.tau_t = epoch < warm ? ssl.dino_tau_t_start + (ssl.dino_tau_t_end - ssl.dino_tau_t_start) *
                                                            static_cast<double>(epoch) / static_cast<double>(warm)
                               : ssl.dino_tau_t_end;
    double total = 0.0;
    const auto batches = epoch_batches(x.rows(), loop.per_epoch, loop.batch, rng);
    for (const auto& idx : batches) {
      const Matrix xb = gather_rows(x, idx);
      std::vector<MlpCache> ce(n_views), ch(n_views);
      std::vector<Matrix> student(n_views), teacher_out(ssl.n_global);
      for (std::size_t v = 0; v < n_views; ++v) {
        const Matrix view = apply_augmentations(v < ssl.n_global ? global : local, xb, rng);
        student[v] = batch_center(forward(head, forward(enc, view, &ce[v]), &ch[v]));
        if (v < ssl.n_global) teacher_out[v] = batch_center(forward(state.networks[1], forward(state.networks[0], view)));
      }
      const LossResult r = dino_multicrop_loss(student, teacher_out, pairs, state);
      check_finite(r.value, "dino", epoch);
      total += r.value;
      Mlp ge = zeros_like(enc), gh = zeros_like(head);
      for (std::size_t v = 0; v < n_views; ++v) {
        const MlpGrads g = backward(head, ch[v], batch_center(r.grad("student" + std::to_string(v))));
        add_into(gh, g.params);
        add_into(ge, backward(enc, ce[v], g.input, false).params);
      }
      ConstParamList grads = params_of(std::as_const(ge), "encoder");
      append(grads, params_of(std::as_const(gh), "head"));
      opt.step(params, grads, lr_at(loop.schedule, step));
      state = update_center(std::move(state), vstack(teacher_out));
      ema_update(teacher, ssmil::as_const(params), cosine_ramp(ssl.dino_ema, 1.0, step, total_steps));
      ++step;
    }
    out.epoch_loss.push_back(total / static_cast<double>(batches.size()));
    log_epoch(log, "dino", epoch, ssl.epochs, out.epoch_loss.back());
  }
  out.encoder = state.networks[0];
  return out;
}

}  // namespace

PretrainResult pretrain_encoder(const Matrix& instances, SslMethod method, const EncoderSettings& encoder,
                                const SslSettings& ssl, std::uint64_t seed, std::ostream* log) {
  if (!is_self_supervised(method))
    throw InvalidParameter("pretrain: '" + std::string(to_string(method)) + "' is not a self-supervised method");
  if (instances.rows() < 2) throw DegenerateInput("pretrain: need at least two instances");
  Mlp enc = init_mlp(encoder.arch(instances.cols()), seed);
  switch (method) {
    case SslMethod::simclr: return pretrain_simclr(instances, std::move(enc), ssl, seed, log);
    case SslMethod::swav: return pretrain_swav(instances, std::move(enc), ssl, seed, log);
    default: return pretrain_dino(instances, std::move(enc), ssl, seed, log);
  }
}

Mlp random_encoder(const EncoderSettings& encoder, std::size_t input_dim, std::uint64_t seed) {
  return init_mlp(encoder.arch(input_dim), seed);
}

PretrainResult supervised_proxy_encoder(const SyntheticConfig& dataset, const EncoderSettings& encoder,
                                        const SslSettings& ssl, std::ostream* log) {
  SyntheticConfig corpus_cfg = dataset;
  corpus_cfg.seed = ssl.proxy_corpus_seed;
  const SyntheticDataset corpus = generate_synthetic(corpus_cfg);
  std::vector<std::size_t> all(corpus.dataset.manifest.n_bags());
  std::iota(all.begin(), all.end(), 0);
  const Matrix x = corpus.dataset.pooled_instances(all);
  const std::vector<std::size_t>& y = corpus.truth.cell_type;
  const std::size_t n_labels = dataset.n_classes + dataset.background_types;

  const std::uint64_t seed = ssl.proxy_corpus_seed + 1;
  std::mt19937_64 rng(seed);
  Mlp enc = init_mlp(encoder.arch(x.cols()), seed);
  Mlp head = init_mlp(head_arch(enc.output_dim(), {n_labels}), seed + 1);
  const AugmentationSpec spec = view_spec(x.cols(), 1.0, 0.0, ssl.translate);
  SslSettings loop_settings = ssl;
  loop_settings.instances_per_epoch = 0;
  const SslLoop loop = make_loop(x.rows(), loop_settings, ssl.proxy_lr, ssl.proxy_epochs);

  ParamList params = params_of(enc, "encoder");
  append(params, params_of(head, "head"));
  Optimizer opt(OptimizerConfig{}, ssmil::as_const(params));
  PretrainResult out;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < ssl.proxy_epochs; ++epoch) {
    double total = 0.0;
    const auto batches = epoch_batches(x.rows(), loop.per_epoch, loop.batch, rng);
    for (const auto& idx : batches) {
      const Matrix xb = apply_augmentations(spec, gather_rows(x, idx), rng);
      MlpCache ce, ch;
      const Matrix logits = forward(head, forward(enc, xb, &ce), &ch);
      const Matrix logp = log_softmax_rows(logits);
      Matrix d(logits.rows(), logits.cols());
      const double inv_n = 1.0 / static_cast<double>(logits.rows());
      double loss = 0.0;
      for (std::size_t i = 0; i < logits.rows(); ++i) {
        const std::size_t label = y[idx[i]];
        loss -= logp(i, label) * inv_n;
        for (std::size_t c = 0; c < logits.cols(); ++c)
          d(i, c) = (std::exp(logp(i, c)) - (c == label ? 1.0 : 0.0)) * inv_n;
      }
      check_finite(loss, "supervised-proxy", epoch);
      total += loss;
      const MlpGrads gh = backward(head, ch, d);
      const Mlp ge = backward(enc, ce, gh.input, false).params;
      ConstParamList grads = params_of(ge, "encoder");
      append(grads, params_of(gh.params, "head"));
      opt.step(params, grads, lr_at(loop.schedule, step++));
    }
    out.epoch_loss.push_back(total / static_cast<double>(batches.size()));
    log_epoch(log, "supervised-proxy", epoch, ssl.proxy_epochs, out.epoch_loss.back());
  }
  out.encoder = std::move(enc);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

// Dihedral elements for: plain, horizontal flip, vertical flip, both flips.
constexpr unsigned kFlipElements[4] = {0, 4, 6, 2};

Matrix transform_rows(const Matrix& x, unsigned g) {
  const std::size_t side = grid_side(x.cols());
  Matrix out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) dihedral_transform(x.row(r), out.row(r), side, g);
  return out;
}

double bag_loss(const BagPrediction& p, std::size_t label) {
  return log_sum_exp(p.logits) - p.logits[label];
}

}  // namespace

EmbeddingCache embed_dataset(const Dataset& dataset, const Mlp& encoder, bool flips) {
  const std::size_t variants = flips && grid_side(dataset.manifest.feature_dim) > 0 ? 4 : 1;
  EmbeddingCache cache;
  cache.bags.resize(dataset.manifest.n_bags());
  for (std::size_t b = 0; b < cache.bags.size(); ++b) {
    const Matrix x = dataset.bag_instances(b);
    cache.bags[b].push_back(forward(encoder, x));
    for (std::size_t v = 1; v < variants; ++v) cache.bags[b].push_back(forward(encoder, transform_rows(x, kFlipElements[v])));
  }
  return cache;
}

BagEvaluation evaluate_bags(const Dataset& dataset, const std::vector<std::size_t>& bags, const MilModel& model,
                            const Mlp& encoder) {
  BagEvaluation out;
  out.predictions.n_classes = model.n_classes();
  out.bags = bags;
  for (std::size_t b : bags) {
    const auto& rec = dataset.manifest.bags.at(b);
    const BagPrediction p = predict_bag(dataset.bag_instances(b), model, &encoder);
    out.predictions.records.push_back(
        {rec.bag_id, rec.label, p.predicted_class, {p.probabilities.begin(), p.probabilities.end()}});
    for (std::size_t i = 0; i < rec.n_instances; ++i)
      out.attention.push_back({rec.bag_id, rec.offset + i, rec.label, p.attention(i, rec.label)});
    out.attention_full.push_back(p.attention);
  }
  return out;
}

MilTrainResult train_mil(const Dataset& dataset, const FoldSplit& split, const Mlp& encoder,
                         const EmbeddingCache* cache, const ExperimentConfig& cfg, std::uint64_t seed,
                         std::ostream* log) {
  const MilSettings& mc = cfg.mil;
  if (split.train.empty() || split.validation.empty())
    throw DegenerateInput("train_mil: fold needs training and validation bags");
  const bool frozen = mc.freeze_encoder;
  if (frozen && (!cache || cache->bags.size() != dataset.manifest.n_bags()))
    throw InvalidParameter("train_mil: a frozen encoder needs the embedding cache of every bag");
  const std::vector<std::size_t> labels = dataset.labels();
  const std::size_t side = grid_side(dataset.manifest.feature_dim);
  const std::size_t n_flips = mc.flip_augment && side > 0 ? 4 : 1;

  MilArch arch{encoder.output_dim(), mc.reduced_dim, mc.attention_hidden, dataset.manifest.n_classes};
  MilModel model = init_mil(arch, seed);
  Mlp enc = encoder;
  {
    Matrix train_embeddings;
    if (frozen) {
      std::vector<Matrix> parts;
      for (std::size_t b : split.train) parts.push_back(cache->bags[b][0]);
      train_embeddings = vstack(parts);
    } else {
      train_embeddings = forward(encoder, dataset.pooled_instances(split.train));
    }
    model.scaler = FeatureScaler::fit(train_embeddings, mc.scaler_floor);
  }

  Optimizer opt(mc.optimizer, mil_params(std::as_const(model)));
  std::optional<Optimizer> enc_opt;
  if (!frozen) enc_opt.emplace(mc.optimizer, params_of(std::as_const(enc), "encoder"));
  const LrSchedule schedule{mc.lr, mc.epochs, 0, ScheduleKind::cosine};
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);

  MilTrainResult out;
  double best = INFINITY;
  MilModel best_model = model;
  Mlp best_enc = enc;
  std::size_t bad = 0;
  for (std::size_t epoch = 0; epoch < mc.epochs; ++epoch) {
    const double lr = lr_at(schedule, epoch);
    const auto order = balanced_bag_sampler(split.train, labels, rng(), split.train.size());
    GradAccumulator acc(mil_params(std::as_const(model)));
    std::optional<GradAccumulator> enc_acc;
    if (!frozen) enc_acc.emplace(params_of(std::as_const(enc), "encoder"));
    double total = 0.0;
    for (std::size_t j = 0; j < order.size(); ++j) {
      const std::size_t b = order[j];
      const std::size_t n = dataset.manifest.bags[b].n_instances;
      std::vector<std::size_t> idx(n);
      std::iota(idx.begin(), idx.end(), 0);
      if (n > mc.instance_cap) {
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(mc.instance_cap);
        std::sort(idx.begin(), idx.end());
      }
      std::uniform_int_distribution<std::size_t> flip(0, n_flips - 1);
      MilLossResult r;
      if (frozen) {
        Matrix z(idx.size(), arch.input_dim);
        for (std::size_t i = 0; i < idx.size(); ++i) {
          const Matrix& src = cache->bags[b][std::min(flip(rng), cache->variants() - 1)];
          std::copy_n(src.row(idx[i]).begin(), z.cols(), z.row(i).begin());
        }
        r = mil_forward_loss(z, labels[b], model);
      } else {
        const Matrix raw = dataset.bag_instances(b);
        Matrix x(idx.size(), raw.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) {
          const std::size_t v = flip(rng);
          if (v == 0) {
            std::copy_n(raw.row(idx[i]).begin(), raw.cols(), x.row(i).begin());
          } else {
            dihedral_transform(raw.row(idx[i]), x.row(i), side, kFlipElements[v]);
          }
        }
        r = mil_forward_loss(x, labels[b], model, &enc, true);
        enc_acc->add(params_of(std::as_const(*r.encoder_grads), "encoder"));
      }
      total += r.value;
      acc.add(mil_params(std::as_const(r.grads)));
      if ((j + 1) % mc.accumulation == 0 || j + 1 == order.size()) {
        const ParamBuffers mean = acc.flush();
        opt.step(mil_params(model), mean.view(), lr);
        if (!frozen) {
          const ParamBuffers enc_mean = enc_acc->flush();
          enc_opt->step(params_of(enc, "encoder"), enc_mean.view(), lr);
        }
      }
    }
    out.train_loss.push_back(total / static_cast<double>(order.size()));

    double val = 0.0;
    for (std::size_t b : split.validation) {
      const BagPrediction p = frozen ? predict_bag(cache->bags[b][0], model)
                                     : predict_bag(dataset.bag_instances(b), model, &enc);
      val += bag_loss(p, labels[b]);
    }
    val /= static_cast<double>(split.validation.size());
    if (!std::isfinite(val) || !std::isfinite(out.train_loss.back()))
      throw TrainingDivergence("mil: non-finite loss in epoch " + std::to_string(epoch));
    out.val_loss.push_back(val);
    out.epochs_run = epoch + 1;
    if (val < best) {
      best = val;
      best_model = model;
      best_enc = enc;
      out.best_epoch = epoch;
      bad = 0;
    } else if (++bad >= mc.patience) {
      break;
    }
  }
  if (log)
    *log << "    mil: " << out.epochs_run << " epochs, best validation loss " << best << " at epoch "
         << out.best_epoch + 1 << "\n";
  // Keep exactly what a checkpoint reproduces.
  out.model = mil_from_checkpoint(mil_checkpoint(best_model));
  if (!frozen) out.tuned_encoder = round_to_f32(best_enc);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

json report_json(const MetricsReport& r) {
  json j;
  j["f1_macro"] = r.f1_macro;
  j["roc_auc_macro"] = r.roc_auc_macro;
  j["pr_auc_macro"] = r.pr_auc_macro;
  j["attention_rank_auc"] = r.attention_rank_auc ? json(*r.attention_rank_auc) : json(nullptr);
  j["confusion"] = r.confusion.counts;
  j["per_class"] = json::array();
  for (const auto& c : r.per_class) j["per_class"].push_back({{"precision", c.precision}, {"recall", c.recall}, {"f1", c.f1}});
  j["warnings"] = r.warnings;
  return j;
}

MetricsReport report_from_json(const json& j) {
  MetricsReport r;
  r.f1_macro = j.at("f1_macro").get<double>();
  r.roc_auc_macro = j.at("roc_auc_macro").get<double>();
  r.pr_auc_macro = j.at("pr_auc_macro").get<double>();
  if (!j.at("attention_rank_auc").is_null()) r.attention_rank_auc = j["attention_rank_auc"].get<double>();
  r.confusion.counts = j.at("confusion").get<std::vector<std::vector<std::size_t>>>();
  for (const auto& c : j.at("per_class"))
    r.per_class.push_back({c.at("precision").get<double>(), c.at("recall").get<double>(), c.at("f1").get<double>()});
  r.warnings = j.at("warnings").get<std::vector<std::string>>();
  return r;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  return os;
}

void write_curve(const fs::path& path, const std::vector<double>& loss) {
  auto os = open_out(path);
  os << "epoch,loss\n";
  for (std::size_t e = 0; e < loss.size(); ++e) os << e + 1 << ',' << fmt(loss[e]) << '\n';
}

}  // namespace

void write_record(const fs::path& path, const RunRecord& r) {
  json j;
  j["run_id"] = r.run_id;
  j["method"] = r.method;
  j["fold"] = r.fold;
  j["run"] = r.run;
  j["seed"] = r.seed;
  j["config_hash"] = r.config_hash;
  j["encoder_checkpoint"] = r.encoder_checkpoint;
  j["encoder_hash_before"] = r.encoder_hash_before;
  j["encoder_hash_after"] = r.encoder_hash_after;
  j["mil_checkpoint"] = r.mil_checkpoint;
  j["test_bags"] = r.test_bags;
  j["metrics"] = report_json(r.report);
  j["epochs_run"] = r.epochs_run;
  j["best_epoch"] = r.best_epoch;
  j["seconds"] = r.seconds;
  auto os = open_out(path);
  os << j.dump(1) << "\n";
}

RunRecord read_record(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    json j;
    is >> j;
    RunRecord r;
    r.run_id = j.at("run_id").get<std::string>();
    r.method = j.at("method").get<std::string>();
    r.fold = j.at("fold").get<std::size_t>();
    r.run = j.at("run").get<std::size_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.encoder_checkpoint = j.at("encoder_checkpoint").get<std::string>();
    r.encoder_hash_before = j.at("encoder_hash_before").get<std::string>();
    r.encoder_hash_after = j.at("encoder_hash_after").get<std::string>();
    r.mil_checkpoint = j.at("mil_checkpoint").get<std::string>();
    r.test_bags = j.at("test_bags").get<std::vector<std::string>>();
    r.report = report_from_json(j.at("metrics"));
    r.epochs_run = j.at("epochs_run").get<std::size_t>();
    r.best_epoch = j.at("best_epoch").get<std::size_t>();
    r.seconds = j.at("seconds").get<double>();
    return r;
  } catch (const json::exception& e) {
    throw IoError("malformed run record " + path.string() + ": " + e.what());
  }
}

std::vector<RunRecord> collect_records(const fs::path& method_dir) {
  const fs::path mil = method_dir / "mil";
  if (!fs::is_directory(mil)) throw IoError("no MIL runs under " + method_dir.string());
  std::vector<RunRecord> out;
  for (const auto& entry : fs::directory_iterator(mil))
    if (fs::exists(entry.path() / "record.json")) out.push_back(read_record(entry.path() / "record.json"));
  if (out.empty()) throw IoError("no run records under " + mil.string());
  std::sort(out.begin(), out.end(),
            [](const RunRecord& a, const RunRecord& b) { return std::tie(a.fold, a.run) < std::tie(b.fold, b.run); });
  return out;
}

std::string format_report(const std::string& method, const std::vector<RunRecord>& records,
                          std::vector<std::string>* warnings) {
  std::vector<MetricsReport> reports;
  for (const auto& r : records) reports.push_back(r.report);
  const auto summary = aggregate(reports, warnings);
  std::ostringstream os;
  os << "method = " << method << "\n";
  if (method == to_string(SslMethod::none_supervised_proxy))
    os << "note = supervised proxy: encoder trained on instance labels of a separately generated corpus\n";
  if (method == to_string(SslMethod::none_random)) os << "note = baseline: randomly initialized frozen encoder\n";
  os << "prediction_sets = " << records.size() << "\n";
  if (!records.empty()) os << "config_hash = " << records.front().config_hash << "\n";
  for (const auto& r : records) {
    os << "run." << r.run_id << ".f1_macro = " << fmt(r.report.f1_macro) << "\n";
    os << "run." << r.run_id << ".roc_auc_macro = " << fmt(r.report.roc_auc_macro) << "\n";
    os << "run." << r.run_id << ".pr_auc_macro = " << fmt(r.report.pr_auc_macro) << "\n";
    if (r.report.attention_rank_auc)
      os << "run." << r.run_id << ".attention_rank_auc = " << fmt(*r.report.attention_rank_auc) << "\n";
  }
  for (const auto& [name, s] : summary) {
    os << name << ".mean = " << fmt(s.mean) << "\n";
    os << name << ".sd = " << fmt(s.sd) << "\n";
  }
  char line[200];
  auto cell = [&](const char* key) {
    const auto& s = summary.at(key);
    std::snprintf(line, sizeof(line), "%.3f +- %.3f", s.mean, s.sd);
    return std::string(line);
  };
  os << "table = " << method << " | F1 " << cell("f1_macro") << " | ROC AUC " << cell("roc_auc_macro") << " | PR AUC "
     << cell("pr_auc_macro") << "\n";
  return os.str();
}

void write_exports(const fs::path& dir, const Dataset& dataset, const BagEvaluation& eval,
                   const MetricsReport& report) {
  fs::create_directories(dir);
  const std::size_t c_count = eval.predictions.n_classes;
  {
    auto os = open_out(dir / "predictions.csv");
    os << "bag_id,true_label,predicted_class";
    for (std::size_t c = 0; c < c_count; ++c) os << ",p" << c;
    os << "\n";
    for (const auto& r : eval.predictions.records) {
      os << r.bag_id << ',' << r.true_label << ',' << r.predicted_class;
      for (double p : r.probabilities) os << ',' << fmt(p);
      os << "\n";
    }
  }
  {
    auto os = open_out(dir / "confusion.csv");
    os << "true\\predicted";
    for (std::size_t c = 0; c < c_count; ++c) os << ',' << c;
    os << "\n";
    for (std::size_t t = 0; t < c_count; ++t) {
      os << t;
      for (std::size_t c : report.confusion.counts[t]) os << ',' << c;
      os << "\n";
    }
  }
  {
    auto roc = open_out(dir / "roc.csv");
    auto pr = open_out(dir / "pr.csv");
    roc << "class,threshold,fpr,tpr\n";
    pr << "class,threshold,recall,precision\n";
    for (std::size_t c = 0; c < c_count; ++c) {
      std::vector<double> scores;
      std::vector<std::uint8_t> pos;
      for (const auto& r : eval.predictions.records) {
        scores.push_back(r.probabilities[c]);
        pos.push_back(r.true_label == c);
      }
      const auto n_pos = std::count(pos.begin(), pos.end(), 1);
      if (n_pos == 0 || n_pos == static_cast<std::ptrdiff_t>(pos.size())) continue;
      for (const auto& p : roc_curve(scores, pos))
        roc << c << ',' << fmt(p.threshold) << ',' << fmt(p.x) << ',' << fmt(p.y) << "\n";
      for (const auto& p : pr_curve(scores, pos))
        pr << c << ',' << fmt(p.threshold) << ',' << fmt(p.x) << ',' << fmt(p.y) << "\n";
    }
  }
  {
    auto os = open_out(dir / "attention.csv");
    os << "bag_id,instance_id,true_label,predicted_class";
    for (std::size_t c = 0; c < c_count; ++c) os << ",a" << c;
    os << "\n";
    for (std::size_t k = 0; k < eval.bags.size(); ++k) {
      const auto& rec = dataset.manifest.bags[eval.bags[k]];
      const Matrix& a = eval.attention_full[k];
      for (std::size_t i = 0; i < rec.n_instances; ++i) {
        os << rec.bag_id << ',' << rec.offset + i << ',' << rec.label << ','
           << eval.predictions.records[k].predicted_class;
        for (std::size_t c = 0; c < c_count; ++c) os << ',' << fmt(a(i, c));
        os << "\n";
      }
    }
  }
  {
    auto os = open_out(dir / "metrics.txt");
    os << "f1_macro = " << fmt(report.f1_macro) << "\n";
    os << "roc_auc_macro = " << fmt(report.roc_auc_macro) << "\n";
    os << "pr_auc_macro = " << fmt(report.pr_auc_macro) << "\n";
    if (report.attention_rank_auc) os << "attention_rank_auc = " << fmt(*report.attention_rank_auc) << "\n";
    for (std::size_t c = 0; c < report.per_class.size(); ++c) {
      os << "class" << c << ".precision = " << fmt(report.per_class[c].precision) << "\n";
      os << "class" << c << ".recall = " << fmt(report.per_class[c].recall) << "\n";
      os << "class" << c << ".f1 = " << fmt(report.per_class[c].f1) << "\n";
    }
    for (const auto& w : report.warnings) os << "warning = " << w << "\n";
  }
}

void write_embeddings(const fs::path& path, const Dataset& dataset, const std::vector<std::size_t>& bags,
                      const Mlp& encoder) {
  auto os = open_out(path);
  os << "bag_id,instance_id";
  for (std::size_t j = 0; j < encoder.output_dim(); ++j) os << ",e" << j;
  os << "\n";
  for (std::size_t b : bags) {
    const auto& rec = dataset.manifest.bags.at(b);
    const Matrix z = forward(encoder, dataset.bag_instances(b));
    for (std::size_t i = 0; i < z.rows(); ++i) {
      os << rec.bag_id << ',' << rec.offset + i;
      for (double v : z.row(i)) os << ',' << fmt(v);
      os << "\n";
    }
  }
}

// ---------------------------------------------------------------------------

Experiment::Experiment(ConfigMap map, std::ostream* log) : map_(std::move(map)), cfg_(resolve(map_)), log_(log) {}

// Where results are written is not part of what the experiment computes.
std::string Experiment::config_hash() const {
  ConfigMap m = map_;
  m.set("output.dir", ConfigMap().get("output.dir"));
  return hex64(m.hash());
}

void Experiment::write_config() const {
  std::error_code ec;
  fs::create_directories(cfg_.output_dir, ec);
  if (ec) throw IoError("cannot create " + cfg_.output_dir.string() + ": " + ec.message());
  auto os = open_out(cfg_.output_dir / "config.txt");
  os << map_.to_text();
}

const LoadedDataset& Experiment::dataset() {
  if (data_) return *data_;
  LoadedDataset d;
  if (cfg_.dataset_path.empty()) {
    d.dir = cfg_.output_dir / "dataset";
    const SyntheticDataset gen = generate_synthetic(cfg_.synthetic);
    write_dataset(d.dir, gen.dataset, &gen.truth);
  } else {
    d.dir = cfg_.dataset_path;
  }
  d.dataset = read_dataset(d.dir);
  data_ = std::move(d);
  return *data_;
}

std::vector<FoldSplit> Experiment::folds() { return stratified_kfold(dataset().dataset.labels(), cfg_.cv.k, cfg_.cv.split_seed); }

fs::path Experiment::method_dir(SslMethod method) const { return cfg_.output_dir / std::string(to_string(method)); }

fs::path Experiment::encoder_dir(SslMethod method, std::optional<std::size_t> fold) const {
  return method_dir(method) / "encoders" / (fold ? "fold" + std::to_string(*fold) : std::string("global"));
}

std::vector<fs::path> Experiment::pretrain(SslMethod method) {
  if (!is_self_supervised(method))
    throw InvalidParameter("pretrain: method '" + std::string(to_string(method)) + "' has no pre-training stage");
  const Dataset& ds = dataset().dataset;
  std::vector<fs::path> out;
  const auto splits = folds();
  const std::size_t stages = cfg_.ssl.per_fold ? splits.size() : 1;
  for (std::size_t f = 0; f < stages; ++f) {
    const auto fold = cfg_.ssl.per_fold ? std::optional<std::size_t>(f) : std::nullopt;
    std::vector<std::size_t> bags;
    if (fold) {
      bags = splits[f].train;
    } else {
      bags.resize(ds.manifest.n_bags());
      std::iota(bags.begin(), bags.end(), 0);
    }
    const auto start = std::chrono::steady_clock::now();
    if (log_) *log_ << to_string(method) << ": pre-training " << (fold ? "fold " + std::to_string(f) : "global") << " on "
                    << bags.size() << " bags\n";
    const std::uint64_t seed = cfg_.ssl.seed + 1000 * f;
    const PretrainResult r = pretrain_encoder(ds.pooled_instances(bags), method, cfg_.encoder, cfg_.ssl, seed, log_);
    const fs::path dir = encoder_dir(method, fold);
    write_checkpoint(dir, encoder_checkpoint(r.encoder, {{"method", std::string(to_string(method))},
                                                         {"fold", fold ? std::to_string(f) : "global"},
                                                         {"seed", std::to_string(seed)},
                                                         {"config_hash", config_hash()}}));
    write_curve(dir.parent_path() / (dir.filename().string() + "_curve.csv"), r.epoch_loss);
    if (log_)
      *log_ << "  done in " << std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()
            << " s\n";
    out.push_back(dir);
  }
  return out;
}

Mlp Experiment::encoder_for(SslMethod method, std::size_t fold, std::string& checkpoint) {
  const Dataset& ds = dataset().dataset;
  fs::path dir;
  if (is_self_supervised(method)) {
    dir = encoder_dir(method, cfg_.ssl.per_fold ? std::optional<std::size_t>(fold) : std::nullopt);
    if (!fs::exists(dir / "manifest"))
      throw IoError("missing encoder checkpoint " + dir.string() + " (run pretrain first)");
  } else if (method == SslMethod::none_random) {
    dir = encoder_dir(method, fold);
    const std::uint64_t seed = cfg_.ssl.seed + 1000 * fold + 500;
    write_checkpoint(dir, encoder_checkpoint(random_encoder(cfg_.encoder, ds.manifest.feature_dim, seed),
                                             {{"method", "none-random"}, {"seed", std::to_string(seed)}}));
  } else {
    dir = encoder_dir(method, std::nullopt);
    if (!fs::exists(dir / "manifest")) {
      if (ds.manifest.provenance != "synthetic")
        throw InvalidParameter("supervised proxy needs a synthetic dataset to mirror");
      if (log_) *log_ << "none-supervised-proxy: training on a separate corpus\n";
      const PretrainResult r = supervised_proxy_encoder(cfg_.synthetic, cfg_.encoder, cfg_.ssl, log_);
      write_checkpoint(dir, encoder_checkpoint(r.encoder, {{"method", "none-supervised-proxy"},
                                                           {"corpus_seed", std::to_string(cfg_.ssl.proxy_corpus_seed)}}));
      write_curve(dir.parent_path() / "global_curve.csv", r.epoch_loss);
    }
  }
  checkpoint = dir.string();
  return encoder_from_checkpoint(read_checkpoint(dir));
}

MethodOutcome Experiment::train_mil(SslMethod method) {
  const auto start = std::chrono::steady_clock::now();
  const LoadedDataset& data = dataset();
  const Dataset& ds = data.dataset;
  std::optional<PlantedTruth> truth;
  if (fs::exists(data.dir / "planted_truth")) truth = read_planted_truth(data.dir);

  MethodOutcome outcome;
  outcome.method = method;
  const fs::path mdir = method_dir(method);
  fs::create_directories(mdir);
  {
    auto os = open_out(mdir / "config.txt");
    os << map_.to_text();
  }
  const auto splits = folds();
  for (std::size_t f = 0; f < splits.size(); ++f) {
    std::string ckpt;
    const Mlp encoder = encoder_for(method, f, ckpt);
    std::optional<EmbeddingCache> cache;
    if (cfg_.mil.freeze_encoder) cache = embed_dataset(ds, encoder, cfg_.mil.flip_augment);
    for (std::size_t run = 0; run < cfg_.cv.runs; ++run) {
      const auto run_start = std::chrono::steady_clock::now();
      RunRecord rec;
      rec.run_id = "fold" + std::to_string(f) + "_run" + std::to_string(run);
      rec.method = std::string(to_string(method));
      rec.fold = f;
      rec.run = run;
      rec.seed = cfg_.cv.run_seed + 100 * run + f;
      rec.config_hash = config_hash();
      rec.encoder_checkpoint = ckpt;
      rec.encoder_hash_before = hex64(checkpoint_hash(ckpt));
      if (log_) *log_ << to_string(method) << ": MIL " << rec.run_id << "\n";

      const MilTrainResult r = ssmil::train_mil(ds, splits[f], encoder, cache ? &*cache : nullptr, cfg_, rec.seed, log_);
      const fs::path run_dir = mdir / "mil" / rec.run_id;
      const Mlp& used = r.tuned_encoder ? *r.tuned_encoder : encoder;
      if (r.tuned_encoder) {
        write_checkpoint(run_dir / "encoder", encoder_checkpoint(*r.tuned_encoder, {{"method", rec.method}}));
        rec.encoder_checkpoint = (run_dir / "encoder").string();
      }
      rec.encoder_hash_after = hex64(checkpoint_hash(ckpt));
      write_checkpoint(run_dir / "mil", mil_checkpoint(r.model, {{"run_id", rec.run_id}, {"config_hash", rec.config_hash}}));
      rec.mil_checkpoint = (run_dir / "mil").string();

      const BagEvaluation eval = evaluate_bags(ds, splits[f].test, r.model, used);
      rec.report = evaluate(eval.predictions);
      if (truth) {
        try {
          rec.report.attention_rank_auc = attention_rank_auc(eval.attention, truth->planted);
        } catch (const DegenerateInput& e) {
          rec.report.warnings.push_back(e.what());
        }
      }
      for (std::size_t b : splits[f].test) rec.test_bags.push_back(ds.manifest.bags[b].bag_id);
      rec.epochs_run = r.epochs_run;
      rec.best_epoch = r.best_epoch;
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - run_start).count();
      write_exports(run_dir, ds, eval, rec.report);
      write_record(run_dir / "record.json", rec);
      if (log_)
        *log_ << "    f1_macro " << rec.report.f1_macro << " roc_auc " << rec.report.roc_auc_macro
              << (rec.report.attention_rank_auc ? " attention_auc " + fmt(*rec.report.attention_rank_auc) : "")
              << "\n";
      outcome.records.push_back(std::move(rec));
    }
  }
  std::vector<MetricsReport> reports;
  for (const auto& r : outcome.records) reports.push_back(r.report);
  outcome.summary = aggregate(reports, &outcome.warnings);
  {
    auto os = open_out(mdir / "report.txt");
    os << format_report(std::string(to_string(method)), outcome.records);
  }
  outcome.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return outcome;
}

}  // namespace ssmil
