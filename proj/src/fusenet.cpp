#include "multifuse/fusenet.hpp"

#include "multifuse/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace multifuse::fusenet {

void FusionConfig::validate() const {
  if (latent_dim < 2 || latent_dim % heads != 0) {
    throw ConfigError("fusenet: latent_dim must be positive and divisible by heads");
  }
  if (latent_dim % 2 != 0) {
    throw ConfigError("fusenet: latent_dim must be even for sinusoidal encodings");
  }
  if (layers < 1) throw ConfigError("fusenet: layers must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) {
    throw ConfigError("fusenet: dropout must be in [0, 1)");
  }
  if (batch_size < 1) throw ConfigError("fusenet: batch_size must be >= 1");
  if (max_epochs < 1) throw ConfigError("fusenet: max_epochs must be >= 1");
  if (mixup_prob < 0.0 || mixup_prob > 1.0) {
    throw ConfigError("fusenet: mixup_prob must be in [0, 1]");
  }
  if (mixup_beta <= 0.0) throw ConfigError("fusenet: mixup_beta must be > 0");
  if (focal_gamma < 0.0) throw ConfigError("fusenet: focal_gamma must be >= 0");
}

namespace {

Matrix pad_rows(const Matrix& m, Index rows) {
  if (m.rows() >= rows) return m;
  Matrix out = Matrix::Zero(rows, m.cols());
  out.topRows(m.rows()) = m;
  return out;
}

Vector one_hot(int label, int num_classes) {
  Vector v = Vector::Zero(num_classes);
  v(label) = 1.0;
  return v;
}

}  // namespace

MixedSample make_plain(const data::Sample& s, const std::string& task,
                       int num_classes) {
  MixedSample out;
  out.audio = s.audio.values;
  out.visual = s.visual.values;
  out.text = s.text;
  out.soft_label = one_hot(s.label(task), num_classes);
  return out;
}

MixedSample mixup_with_lambda(const data::Sample& a, const data::Sample& b,
                              const std::string& task, int num_classes,
                              double lambda) {
  const Index ta = std::max(a.audio.frames(), b.audio.frames());
  const Index tv = std::max(a.visual.frames(), b.visual.frames());
  MixedSample out;
  out.audio = lambda * pad_rows(a.audio.values, ta) +
              (1.0 - lambda) * pad_rows(b.audio.values, ta);
  out.visual = lambda * pad_rows(a.visual.values, tv) +
               (1.0 - lambda) * pad_rows(b.visual.values, tv);
  out.text = lambda * a.text + (1.0 - lambda) * b.text;
  out.soft_label = lambda * one_hot(a.label(task), num_classes) +
                   (1.0 - lambda) * one_hot(b.label(task), num_classes);
  out.lambda = lambda;
  out.mixed = true;
  return out;
}

MixedSample mixup(const data::Sample& a, const data::Sample& b,
                  const std::string& task, int num_classes, Rng& rng,
                  double prob, double beta_param) {
  if (rng.uniform() >= prob) return make_plain(a, task, num_classes);
  const double lambda = rng.beta(beta_param, beta_param);
  return mixup_with_lambda(a, b, task, num_classes, lambda);
}

std::pair<Vector, Vector> attention_pool(const Eigen::Ref<const Matrix>& h,
                                         const nn::Tensor& score) {
  if (h.rows() < 1) throw DataError("attention_pool: empty sequence");
  const Vector scores = h * score.value.col(0);
  const double m = scores.maxCoeff();
  Vector alpha = (scores.array() - m).exp();
  alpha /= alpha.sum();
  Vector pooled = h.transpose() * alpha;
  return {std::move(pooled), std::move(alpha)};
}

std::string TrainHistory::to_csv() const {
  std::ostringstream os;
  os << "epoch,train_loss,dev_loss,dev_wf1,dev_uf1,lr\n";
  for (const auto& e : epochs) {
    os << e.epoch << "," << e.train_loss << "," << e.dev_loss << "," << e.dev_wf1
       << "," << e.dev_uf1 << "," << e.lr << "\n";
  }
  return os.str();
}

FusionModel::FusionModel(Index audio_dim, Index visual_dim, Index text_dim,
                         int num_classes, const FusionConfig& cfg)
    : cfg_(cfg),
      num_classes_(num_classes),
      d_audio_(audio_dim),
      d_visual_(visual_dim),
      d_text_(text_dim) {
  cfg_.validate();
  if (num_classes_ < 2) throw ConfigError("fusenet: need at least 2 classes");

  audio_ = build_modality("audio", d_audio_, true);
  visual_ = build_modality("visual", d_visual_, true);

  const Index d = cfg_.latent_dim;
  text_w_ = &params_.add("text.proj.w", d_text_, d);
  text_b_ = &params_.add("text.proj.b", 1, d);
  text_ln_g_ = &params_.add("text.proj.ln_g", 1, d);
  text_ln_b_ = &params_.add("text.proj.ln_b", 1, d);

  head_w1_ = &params_.add("head.w1", 3 * d, cfg_.head_hidden1);
  head_b1_ = &params_.add("head.b1", 1, cfg_.head_hidden1);
  head_ln1_g_ = &params_.add("head.ln1_g", 1, cfg_.head_hidden1);
  head_ln1_b_ = &params_.add("head.ln1_b", 1, cfg_.head_hidden1);
  head_w2_ = &params_.add("head.w2", cfg_.head_hidden1, cfg_.head_hidden2);
  head_b2_ = &params_.add("head.b2", 1, cfg_.head_hidden2);
  head_ln2_g_ = &params_.add("head.ln2_g", 1, cfg_.head_hidden2);
  head_ln2_b_ = &params_.add("head.ln2_b", 1, cfg_.head_hidden2);
  head_w3_ = &params_.add("head.w3", cfg_.head_hidden2, num_classes_);
  head_b3_ = &params_.add("head.b3", 1, num_classes_);

  init_weights();
}

FusionModel::ModalityParams FusionModel::build_modality(
    const std::string& prefix, Index input_dim, bool with_encoder) {
  const Index d = cfg_.latent_dim;
  ModalityParams p;
  p.proj_w = &params_.add(prefix + ".proj.w", input_dim, d);
  p.proj_b = &params_.add(prefix + ".proj.b", 1, d);
  p.ln_g = &params_.add(prefix + ".proj.ln_g", 1, d);
  p.ln_b = &params_.add(prefix + ".proj.ln_b", 1, d);
  if (with_encoder) {
    for (int l = 0; l < cfg_.layers; ++l) {
      const std::string lp = prefix + ".enc" + std::to_string(l);
      EncoderLayerParams e;
      e.wq = &params_.add(lp + ".wq", d, d);
      e.bq = &params_.add(lp + ".bq", 1, d);
      e.wk = &params_.add(lp + ".wk", d, d);
      e.bk = &params_.add(lp + ".bk", 1, d);
      e.wv = &params_.add(lp + ".wv", d, d);
      e.bv = &params_.add(lp + ".bv", 1, d);
      e.wo = &params_.add(lp + ".wo", d, d);
      e.bo = &params_.add(lp + ".bo", 1, d);
      e.ln1_g = &params_.add(lp + ".ln1_g", 1, d);
      e.ln1_b = &params_.add(lp + ".ln1_b", 1, d);
      e.ff_w1 = &params_.add(lp + ".ff_w1", d, 4 * d);
      e.ff_b1 = &params_.add(lp + ".ff_b1", 1, 4 * d);
      e.ff_w2 = &params_.add(lp + ".ff_w2", 4 * d, d);
      e.ff_b2 = &params_.add(lp + ".ff_b2", 1, d);
      e.ln2_g = &params_.add(lp + ".ln2_g", 1, d);
      e.ln2_b = &params_.add(lp + ".ln2_b", 1, d);
      p.layers.push_back(e);
    }
    p.pool_score = &params_.add(prefix + ".pool.s", d, 1);
  }
  return p;
}

void FusionModel::init_weights() {
  Rng rng = Rng(cfg_.seed).substream("fusenet_init");
  for (auto& t : params_.tensors()) {
    const std::string& n = t->name;
    if (n.ends_with("pool.s")) {
      nn::fill_normal(*t, 0.02, rng);
    } else if (t->value.rows() == 1) {
      // 1 x d tensors are biases and layer-norm params.
      if (n.ends_with("_g")) {
        t->value.setOnes();
      } else {
        t->value.setZero();
      }
    } else {
      nn::glorot_uniform(*t, rng);
    }
  }
}

Matrix FusionModel::encode_modality(const ModalityParams& p,
                                    const Eigen::Ref<const Matrix>& x,
                                    bool training, Rng& rng,
                                    ModalityCache* cache) const {
  if (x.cols() != p.proj_w->value.rows()) {
    throw DimensionError("fusenet: modality input dim " +
                         std::to_string(x.cols()) + " does not match " +
                         std::to_string(p.proj_w->value.rows()));
  }
  if (cache) cache->input = x;

  Matrix pre = nn::linear(x, *p.proj_w, *p.proj_b);
  if (cache) cache->proj_pre = pre;
  Matrix h = nn::layer_norm(pre, *p.ln_g, *p.ln_b,
                            cache ? &cache->proj_ln : nullptr);
  if (cfg_.use_positional_encoding) {
    h += nn::positional_encoding(h.rows(), h.cols());
  }

  if (cache) cache->layers.resize(p.layers.size());
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& lp = p.layers[l];
    EncoderLayerCache* lc = cache ? &cache->layers[l] : nullptr;

    Matrix attn = nn::multihead_attention(
        h, cfg_.heads, *lp.wq, *lp.bq, *lp.wk, *lp.bk, *lp.wv, *lp.bv, *lp.wo,
        *lp.bo, /*causal=*/false, lc ? &lc->attn : nullptr);
    Matrix attn_dropped = nn::dropout(attn, cfg_.dropout, training, rng,
                                      lc ? &lc->attn_drop : nullptr);
    Matrix res1 = h + attn_dropped;
    Matrix x1 = nn::layer_norm(res1, *lp.ln1_g, *lp.ln1_b,
                               lc ? &lc->ln1 : nullptr);

    Matrix ff_pre = nn::linear(x1, *lp.ff_w1, *lp.ff_b1);
    Matrix ff_act = nn::relu(ff_pre);
    Matrix ff_out = nn::linear(ff_act, *lp.ff_w2, *lp.ff_b2);
    Matrix ff_dropped = nn::dropout(ff_out, cfg_.dropout, training, rng,
                                    lc ? &lc->ff_drop : nullptr);
    Matrix res2 = x1 + ff_dropped;
    Matrix x2 = nn::layer_norm(res2, *lp.ln2_g, *lp.ln2_b,
                               lc ? &lc->ln2 : nullptr);

    if (lc) {
      lc->x1 = std::move(x1);
      lc->ff_pre = std::move(ff_pre);
      lc->ff_act = std::move(ff_act);
    }
    h = std::move(x2);
  }
  if (cache) cache->encoded = h;
  return h;
}

Matrix FusionModel::encode_modality_backward(const ModalityParams& p,
                                             const Eigen::Ref<const Matrix>& dh_in,
                                             const ModalityCache& cache) {
  Matrix dh = dh_in;
  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const auto& lp = p.layers[li];
    const EncoderLayerCache& lc = cache.layers[li];

    // x2 = LN2(x1 + ff_dropped)
    Matrix dres2 = nn::layer_norm_backward(dh, lc.ln2, *lp.ln2_g, *lp.ln2_b);
    Matrix dx1 = dres2;  // residual branch
    Matrix dff_out = nn::dropout_backward(dres2, lc.ff_drop);
    Matrix dff_act = nn::linear_backward(dff_out, lc.ff_act, *lp.ff_w2, *lp.ff_b2);
    Matrix dff_pre = nn::relu_backward(dff_act, lc.ff_pre);
    dx1 += nn::linear_backward(dff_pre, lc.x1, *lp.ff_w1, *lp.ff_b1);

    // x1 = LN1(h + attn_dropped)
    Matrix dres1 = nn::layer_norm_backward(dx1, lc.ln1, *lp.ln1_g, *lp.ln1_b);
    Matrix dattn = nn::dropout_backward(dres1, lc.attn_drop);
    dh = dres1;  // residual branch
    dh += nn::multihead_attention_backward(dattn, lc.attn, cfg_.heads, *lp.wq,
                                           *lp.bq, *lp.wk, *lp.bk, *lp.wv,
                                           *lp.bv, *lp.wo, *lp.bo);
  }

  // Positional encodings are additive constants; gradients pass through.
  Matrix dpre = nn::layer_norm_backward(dh, cache.proj_ln, *p.ln_g, *p.ln_b);
  return nn::linear_backward(dpre, cache.input, *p.proj_w, *p.proj_b);
}

Vector FusionModel::forward(const MixedSample& s, bool training, Rng& rng,
                            Cache* cache) const {
  ModalityCache audio_local, visual_local;
  ModalityCache* ac = cache ? &cache->audio : &audio_local;
  ModalityCache* vc = cache ? &cache->visual : &visual_local;

  Matrix ha = encode_modality(audio_, s.audio, training, rng, ac);
  Matrix hv = encode_modality(visual_, s.visual, training, rng, vc);

  auto [pooled_a, alpha_a] = attention_pool(ha, *audio_.pool_score);
  auto [pooled_v, alpha_v] = attention_pool(hv, *visual_.pool_score);
  ac->alpha = alpha_a;
  ac->pooled = pooled_a;
  vc->alpha = alpha_v;
  vc->pooled = pooled_v;

  if (s.text.size() != d_text_) {
    throw DimensionError("fusenet: text dim mismatch");
  }
  Matrix text_in = s.text.transpose();
  Matrix text_pre = nn::linear(text_in, *text_w_, *text_b_);
  Matrix text_norm = nn::layer_norm(text_pre, *text_ln_g_, *text_ln_b_,
                                    cache ? &cache->text_ln : nullptr);
  Vector z_t = text_norm.row(0).transpose();

  const Index d = cfg_.latent_dim;
  Vector fused(3 * d);
  fused << pooled_a, pooled_v, z_t;

  Matrix fused_row = fused.transpose();
  Matrix h1_pre = nn::linear(fused_row, *head_w1_, *head_b1_);
  Matrix h1_act = nn::relu(h1_pre);
  Matrix h1_normed = nn::layer_norm(h1_act, *head_ln1_g_, *head_ln1_b_,
                                    cache ? &cache->h1_ln : nullptr);
  Matrix h1_dropped = nn::dropout(h1_normed, cfg_.dropout, training, rng,
                                  cache ? &cache->h1_drop : nullptr);

  Matrix h2_pre = nn::linear(h1_dropped, *head_w2_, *head_b2_);
  Matrix h2_act = nn::relu(h2_pre);
  Matrix h2_normed = nn::layer_norm(h2_act, *head_ln2_g_, *head_ln2_b_,
                                    cache ? &cache->h2_ln : nullptr);
  Matrix h2_dropped = nn::dropout(h2_normed, cfg_.dropout, training, rng,
                                  cache ? &cache->h2_drop : nullptr);

  Matrix logits_row = nn::linear(h2_dropped, *head_w3_, *head_b3_);
  Vector logits = logits_row.row(0).transpose();

  if (cache) {
    cache->text_in = std::move(text_in);
    cache->text_z = std::move(z_t);
    cache->fused = std::move(fused);
    cache->h1_pre = std::move(h1_pre);
    cache->h1_act = std::move(h1_act);
    cache->h1_normed = std::move(h1_normed);
    cache->h1_dropped = std::move(h1_dropped);
    cache->h2_pre = std::move(h2_pre);
    cache->h2_act = std::move(h2_act);
    cache->h2_normed = std::move(h2_normed);
    cache->h2_dropped = std::move(h2_dropped);
    cache->logits = logits;
  }
  return logits;
}

Vector FusionModel::forward_eval(const MixedSample& s) const {
  Rng unused(0);
  return forward(s, /*training=*/false, unused, nullptr);
}

void FusionModel::backward(const Cache& cache, const Vector& dlogits) {
  Matrix dl_row = dlogits.transpose();

  Matrix dh2_dropped = nn::linear_backward(dl_row, cache.h2_dropped, *head_w3_,
                                           *head_b3_);
  Matrix dh2_normed = nn::dropout_backward(dh2_dropped, cache.h2_drop);
  Matrix dh2_act = nn::layer_norm_backward(dh2_normed, cache.h2_ln,
                                           *head_ln2_g_, *head_ln2_b_);
  Matrix dh2_pre = nn::relu_backward(dh2_act, cache.h2_pre);
  Matrix dh1_dropped = nn::linear_backward(dh2_pre, cache.h1_dropped, *head_w2_,
                                           *head_b2_);
  Matrix dh1_normed = nn::dropout_backward(dh1_dropped, cache.h1_drop);
  Matrix dh1_act = nn::layer_norm_backward(dh1_normed, cache.h1_ln,
                                           *head_ln1_g_, *head_ln1_b_);
  Matrix dh1_pre = nn::relu_backward(dh1_act, cache.h1_pre);
  Matrix dfused_row = nn::linear_backward(dh1_pre, cache.fused.transpose(),
                                          *head_w1_, *head_b1_);

  const Index d = cfg_.latent_dim;
  const Vector dfused = dfused_row.row(0).transpose();
  const Vector dpooled_a = dfused.segment(0, d);
  const Vector dpooled_v = dfused.segment(d, d);
  const Vector dz_t = dfused.segment(2 * d, d);

  // Text branch.
  Matrix dtext_norm = dz_t.transpose();
  Matrix dtext_pre = nn::layer_norm_backward(dtext_norm, cache.text_ln,
                                             *text_ln_g_, *text_ln_b_);
  nn::linear_backward(dtext_pre, cache.text_in, *text_w_, *text_b_);

  // Pooling backward then encoder stacks.
  auto pool_backward = [&](const ModalityParams& p, const ModalityCache& mc,
                           const Vector& dpooled) {
    const Matrix& h = mc.encoded;
    const Vector& alpha = mc.alpha;
    Vector dalpha = h * dpooled;
    Matrix dh = alpha * dpooled.transpose();
    const double dot = alpha.dot(dalpha);
    Vector dscores = alpha.cwiseProduct(dalpha.array().matrix() -
                                        Vector::Constant(alpha.size(), dot));
    p.pool_score->grad.col(0) += h.transpose() * dscores;
    dh += dscores * p.pool_score->value.col(0).transpose();
    encode_modality_backward(p, dh, mc);
  };
  pool_backward(audio_, cache.audio, dpooled_a);
  pool_backward(visual_, cache.visual, dpooled_v);
}

std::vector<int> FusionModel::predict(const data::Dataset& ds,
                                      const std::string& task) const {
  std::vector<int> preds;
  preds.reserve(ds.samples.size());
  for (const auto& s : ds.samples) {
    const Vector logits = forward_eval(make_plain(s, task, num_classes_));
    Index arg = 0;
    logits.maxCoeff(&arg);
    preds.push_back(static_cast<int>(arg));
  }
  return preds;
}

namespace {

Vector resolve_focal_alpha(const FusionConfig& cfg,
                           const std::vector<int>& labels, int num_classes) {
  if (!cfg.focal_alpha.empty()) {
    if (static_cast<int>(cfg.focal_alpha.size()) != num_classes) {
      throw ConfigError("focal_alpha size does not match class count");
    }
    return Eigen::Map<const Vector>(cfg.focal_alpha.data(), num_classes);
  }
  // Normalized inverse class frequency, scaled so balanced data gives 1.
  Vector counts = Vector::Zero(num_classes);
  for (int y : labels) counts(y) += 1.0;
  Vector inv = counts.array().max(1.0).inverse();
  return inv * (static_cast<double>(num_classes) / inv.sum());
}

}  // namespace

FusionModel train(const data::Dataset& train_set, const data::Dataset& dev_set,
                  const std::string& task, const FusionConfig& cfg,
                  TrainHistory* history) {
  cfg.validate();
  if (train_set.size() < 1) throw DataError("fusenet train: empty training set");
  const auto& task_spec = train_set.manifest.task(task);
  const int num_classes = task_spec.num_classes();
  const Index d_a = train_set.manifest.feature("audio").dim;
  const Index d_v = train_set.manifest.feature("visual").dim;
  const Index d_t = train_set.manifest.feature("text").dim;

  FusionModel model(d_a, d_v, d_t, num_classes, cfg);
  const std::vector<int> train_labels = train_set.labels(task);
  const Vector alpha = resolve_focal_alpha(cfg, train_labels, num_classes);
  const std::vector<int> dev_labels =
      dev_set.size() > 0 ? dev_set.labels(task) : std::vector<int>{};

  Rng rng = Rng(cfg.seed).substream("fusenet_train");
  nn::AdamW opt;
  opt.weight_decay = cfg.weight_decay;

  const Index n = train_set.size();
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});

  double best_wf1 = -1.0;
  int best_epoch = -1;
  std::vector<Matrix> best_values;
  int since_best = 0;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const double warm =
        cfg.warmup_epochs > 0
            ? std::min(1.0, static_cast<double>(epoch + 1) /
                                static_cast<double>(cfg.warmup_epochs))
            : 1.0;
    const double lr = cfg.learning_rate * warm;

    rng.shuffle(order);
    double epoch_loss = 0.0;
    Index step = 0;
    for (Index start = 0; start < n; start += cfg.batch_size) {
      const Index batch_end = std::min<Index>(n, start + cfg.batch_size);
      const Index batch_n = batch_end - start;
      model.params().zero_grad();
      for (Index bi = start; bi < batch_end; ++bi) {
        const data::Sample& s =
            train_set.samples[static_cast<std::size_t>(order[static_cast<std::size_t>(bi)])];
        MixedSample ms;
        if (cfg.use_mixup) {
          const Index partner = static_cast<Index>(
              rng.uniform_int(static_cast<std::uint64_t>(n)));
          ms = mixup(s, train_set.samples[static_cast<std::size_t>(partner)],
                     task, num_classes, rng, cfg.mixup_prob, cfg.mixup_beta);
        } else {
          ms = make_plain(s, task, num_classes);
        }
        FusionModel::Cache cache;
        const Vector logits = model.forward(ms, /*training=*/true, rng, &cache);
        Vector dlogits;
        const double loss =
            nn::focal_loss(logits, ms.soft_label, cfg.focal_gamma, alpha, &dlogits);
        if (!std::isfinite(loss)) {
          throw TrainError("fusenet diverged at epoch " + std::to_string(epoch + 1) +
                           " step " + std::to_string(step + 1));
        }
        epoch_loss += loss;
        model.backward(cache, dlogits);
      }
      model.params().scale_grad(1.0 / static_cast<double>(batch_n));
      model.params().clip_grad_norm(cfg.clip_norm);
      opt.step(model.params(), lr);
      ++step;
    }
    epoch_loss /= static_cast<double>(n);

    EpochStats stats;
    stats.epoch = epoch + 1;
    stats.train_loss = epoch_loss;
    stats.lr = lr;

    if (dev_set.size() > 0) {
      double dev_loss = 0.0;
      std::vector<int> preds;
      preds.reserve(static_cast<std::size_t>(dev_set.size()));
      for (const auto& s : dev_set.samples) {
        MixedSample ms = make_plain(s, task, num_classes);
        const Vector logits = model.forward_eval(ms);
        dev_loss += nn::focal_loss(logits, ms.soft_label, cfg.focal_gamma, alpha);
        Index arg = 0;
        logits.maxCoeff(&arg);
        preds.push_back(static_cast<int>(arg));
      }
      stats.dev_loss = dev_loss / static_cast<double>(dev_set.size());
      const eval::Metrics m = eval::compute_metrics(preds, dev_labels, num_classes);
      stats.dev_wf1 = m.weighted_f1;
      stats.dev_uf1 = m.unweighted_f1;

      if (m.weighted_f1 > best_wf1) {
        best_wf1 = m.weighted_f1;
        best_epoch = epoch + 1;
        best_values = model.params().snapshot();
        since_best = 0;
      } else {
        ++since_best;
      }
      if (history) history->epochs.push_back(stats);
      if (since_best >= cfg.patience) break;
    } else if (history) {
      history->epochs.push_back(stats);
    }
  }

  if (!best_values.empty()) model.params().restore(best_values);
  if (history) {
    history->best_epoch = best_epoch;
    history->best_dev_wf1 = best_wf1;
  }
  return model;
}

double grad_check(FusionModel& model, const std::vector<MixedSample>& batch,
                  double epsilon, int num_coords, std::uint64_t seed) {
  if (batch.empty()) throw ConfigError("grad_check: empty batch");
  if (model.config().dropout != 0.0) {
    throw ConfigError("grad_check requires a dropout-free model");
  }
  const int num_classes = model.num_classes();
  Vector alpha = Vector::Ones(num_classes);
  const double gamma = model.config().focal_gamma;
  Rng rng(0);

  auto batch_loss = [&]() {
    double total = 0.0;
    for (const auto& s : batch) {
      const Vector logits = model.forward(s, /*training=*/true, rng, nullptr);
      total += nn::focal_loss(logits, s.soft_label, gamma, alpha);
    }
    return total / static_cast<double>(batch.size());
  };

  model.params().zero_grad();
  for (const auto& s : batch) {
    FusionModel::Cache cache;
    const Vector logits = model.forward(s, /*training=*/true, rng, &cache);
    Vector dlogits;
    nn::focal_loss(logits, s.soft_label, gamma, alpha, &dlogits);
    model.backward(cache, dlogits);
  }
  model.params().scale_grad(1.0 / static_cast<double>(batch.size()));

  // Flat coordinate space across tensors in registration order.
  std::vector<std::pair<std::size_t, Index>> coords;
  Index total = 0;
  for (const auto& t : model.params().tensors()) total += t->size();
  Rng pick = Rng(seed).substream("gradcheck");
  for (int i = 0; i < num_coords; ++i) {
    Index flat = static_cast<Index>(pick.uniform_int(static_cast<std::uint64_t>(total)));
    std::size_t ti = 0;
    for (const auto& t : model.params().tensors()) {
      if (flat < t->size()) break;
      flat -= t->size();
      ++ti;
    }
    coords.emplace_back(ti, flat);
  }

  double max_rel = 0.0;
  for (const auto& [ti, flat] : coords) {
    nn::Tensor& t = *model.params().tensors()[ti];
    double* p = t.value.data() + flat;
    const double analytic = t.grad.data()[flat];
    const double original = *p;
    *p = original + epsilon;
    const double lp = batch_loss();
    *p = original - epsilon;
    const double lm = batch_loss();
    *p = original;
    const double numeric = (lp - lm) / (2.0 * epsilon);
    const double rel = std::abs(analytic - numeric) /
                       std::max({1.0, std::abs(analytic), std::abs(numeric)});
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace multifuse::fusenet
