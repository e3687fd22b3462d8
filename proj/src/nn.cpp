#include "multifuse/nn.hpp"

#include "multifuse/mpf.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace multifuse::nn {

using nlohmann::json;

Tensor& ParamStore::add(const std::string& name, Index rows, Index cols,
                        const std::string& group) {
  for (const auto& t : tensors_) {
    if (t->name == name) throw ConfigError("duplicate tensor name: " + name);
  }
  auto t = std::make_unique<Tensor>();
  t->name = name;
  t->group = group;
  t->value.setZero(rows, cols);
  t->grad.setZero(rows, cols);
  t->m.setZero(rows, cols);
  t->v.setZero(rows, cols);
  tensors_.push_back(std::move(t));
  return *tensors_.back();
}

Tensor& ParamStore::find(const std::string& name) {
  for (auto& t : tensors_) {
    if (t->name == name) return *t;
  }
  throw ConfigError("unknown tensor: " + name);
}

void ParamStore::zero_grad() {
  for (auto& t : tensors_) t->zero_grad();
}

double ParamStore::grad_norm() const {
  double sq = 0.0;
  for (const auto& t : tensors_) {
    if (t->trainable) sq += t->grad.squaredNorm();
  }
  return std::sqrt(sq);
}

void ParamStore::clip_grad_norm(double max_norm) {
  const double norm = grad_norm();
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (auto& t : tensors_) {
      if (t->trainable) t->grad *= scale;
    }
  }
}

void ParamStore::scale_grad(double factor) {
  for (auto& t : tensors_) t->grad *= factor;
}

Index ParamStore::trainable_parameters() const {
  Index n = 0;
  for (const auto& t : tensors_) {
    if (t->trainable) n += t->size();
  }
  return n;
}

Index ParamStore::total_parameters() const {
  Index n = 0;
  for (const auto& t : tensors_) n += t->size();
  return n;
}

std::uint64_t ParamStore::checksum(const std::string& group) const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& t : tensors_) {
    if (!group.empty() && t->group != group) continue;
    h = fnv1a64(t->name, h);
    h = fnv1a64(t->value.data(),
                static_cast<std::size_t>(t->value.size()) * sizeof(double), h);
  }
  return h;
}

std::vector<Matrix> ParamStore::snapshot() const {
  std::vector<Matrix> out;
  out.reserve(tensors_.size());
  for (const auto& t : tensors_) out.push_back(t->value);
  return out;
}

void ParamStore::restore(const std::vector<Matrix>& values) {
  if (values.size() != tensors_.size()) {
    throw ConfigError("snapshot size mismatch");
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    tensors_[i]->value = values[i];
  }
}

void ParamStore::save(const std::filesystem::path& dir) const {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  json index = json::array();
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    const Tensor& t = *tensors_[i];
    std::string file = t.name;
    std::replace_if(
        file.begin(), file.end(),
        [](char c) { return !std::isalnum(static_cast<unsigned char>(c)); },
        '_');
    char prefix[16];
    std::snprintf(prefix, sizeof prefix, "t%04zu_", i);
    file = std::string(prefix) + file + ".mpf";
    mpf::write_matrix(dir / file, t.value);
    index.push_back({{"name", t.name},
                     {"file", file},
                     {"rows", t.value.rows()},
                     {"cols", t.value.cols()},
                     {"group", t.group}});
  }
  std::ofstream os(dir / "index.json");
  if (!os) throw IoError("cannot write checkpoint index in " + dir.string());
  os << json{{"tensors", index}}.dump(2) << "\n";
}

void ParamStore::load(const std::filesystem::path& dir) {
  std::ifstream is(dir / "index.json");
  if (!is) throw IoError("cannot read checkpoint index in " + dir.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw IoError("checkpoint index parse error: " + std::string(e.what()));
  }
  const auto& index = j.at("tensors");
  if (index.size() != tensors_.size()) {
    throw ConfigError("checkpoint has " + std::to_string(index.size()) +
                      " tensors, model expects " +
                      std::to_string(tensors_.size()));
  }
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    const auto& entry = index[i];
    Tensor& t = *tensors_[i];
    if (entry.at("name").get<std::string>() != t.name) {
      throw ConfigError("checkpoint tensor order mismatch at " + t.name);
    }
    Matrix v = mpf::read_matrix(dir / entry.at("file").get<std::string>());
    if (v.rows() != t.value.rows() || v.cols() != t.value.cols()) {
      throw DimensionError("checkpoint shape mismatch for " + t.name);
    }
    t.value = std::move(v);
  }
}

void AdamW::step(ParamStore& params, double lr,
                 const std::map<std::string, double>& group_lr) {
  ++step_count;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
  for (auto& t : params.tensors()) {
    if (!t->trainable) continue;
    double rate = lr;
    if (auto it = group_lr.find(t->group); it != group_lr.end()) {
      rate = it->second;
    }
    t->m = beta1 * t->m + (1.0 - beta1) * t->grad;
    t->v = beta2 * t->v + (1.0 - beta2) * t->grad.cwiseProduct(t->grad);
    const Matrix mhat = t->m / bc1;
    const Matrix vhat = t->v / bc2;
    t->value -=
        rate * (mhat.array() / (vhat.array().sqrt() + eps)).matrix();
    if (weight_decay > 0.0) {
      t->value -= rate * weight_decay * t->value;
    }
  }
}

void glorot_uniform(Tensor& t, Rng& rng) {
  const double fan_in = static_cast<double>(t.value.rows());
  const double fan_out = static_cast<double>(t.value.cols());
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  for (Index i = 0; i < t.value.rows(); ++i) {
    for (Index j = 0; j < t.value.cols(); ++j) {
      t.value(i, j) = rng.uniform(-limit, limit);
    }
  }
}

void fill_normal(Tensor& t, double stddev, Rng& rng) {
  for (Index i = 0; i < t.value.rows(); ++i) {
    for (Index j = 0; j < t.value.cols(); ++j) {
      t.value(i, j) = stddev * rng.normal();
    }
  }
}

Matrix linear(const Eigen::Ref<const Matrix>& x, const Tensor& w,
              const Tensor& b) {
  if (x.cols() != w.value.rows()) {
    throw DimensionError("linear: input dim " + std::to_string(x.cols()) +
                         " vs weight " + std::to_string(w.value.rows()));
  }
  return (x * w.value).rowwise() + b.value.row(0);
}

Matrix linear_backward(const Eigen::Ref<const Matrix>& dy,
                       const Eigen::Ref<const Matrix>& x, Tensor& w,
                       Tensor& b) {
  w.grad += x.transpose() * dy;
  b.grad.row(0) += dy.colwise().sum();
  return dy * w.value.transpose();
}

Matrix layer_norm(const Eigen::Ref<const Matrix>& x, const Tensor& gamma,
                  const Tensor& beta, LayerNormCache* cache) {
  const Index rows = x.rows();
  const Index d = x.cols();
  Matrix xhat(rows, d);
  Vector inv_std(rows);
  for (Index i = 0; i < rows; ++i) {
    const double mean = x.row(i).mean();
    const double var = (x.row(i).array() - mean).square().mean();
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std(i) = is;
    xhat.row(i) = (x.row(i).array() - mean) * is;
  }
  Matrix y = (xhat.array().rowwise() * gamma.value.row(0).array()).matrix();
  y.rowwise() += beta.value.row(0);
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

Matrix layer_norm_backward(const Eigen::Ref<const Matrix>& dy,
                           const LayerNormCache& cache, Tensor& gamma,
                           Tensor& beta) {
  const Index rows = dy.rows();
  const Index d = dy.cols();
  gamma.grad.row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  beta.grad.row(0) += dy.colwise().sum();

  Matrix dx(rows, d);
  for (Index i = 0; i < rows; ++i) {
    const Eigen::RowVectorXd dxhat =
        dy.row(i).cwiseProduct(gamma.value.row(0));
    const double mean_dxhat = dxhat.mean();
    const double mean_dxhat_xhat = dxhat.cwiseProduct(cache.xhat.row(i)).mean();
    dx.row(i) = cache.inv_std(i) *
                (dxhat.array() - mean_dxhat -
                 cache.xhat.row(i).array() * mean_dxhat_xhat);
  }
  return dx;
}

Matrix softmax_rows(const Eigen::Ref<const Matrix>& scores, bool causal) {
  Matrix p = Matrix::Zero(scores.rows(), scores.cols());
  for (Index i = 0; i < scores.rows(); ++i) {
    const Index limit = causal ? std::min(i + 1, scores.cols()) : scores.cols();
    const double m = scores.row(i).head(limit).maxCoeff();
    Eigen::RowVectorXd e = (scores.row(i).head(limit).array() - m).exp();
    p.row(i).head(limit) = e / e.sum();
  }
  return p;
}

Matrix softmax_rows_backward(const Eigen::Ref<const Matrix>& dp,
                             const Eigen::Ref<const Matrix>& p) {
  Matrix ds(p.rows(), p.cols());
  for (Index i = 0; i < p.rows(); ++i) {
    const double dot = dp.row(i).cwiseProduct(p.row(i)).sum();
    ds.row(i) = (p.row(i).array() * (dp.row(i).array() - dot)).matrix();
  }
  return ds;
}

Matrix multihead_attention(const Eigen::Ref<const Matrix>& x, int heads,
                           const Tensor& wq, const Tensor& bq, const Tensor& wk,
                           const Tensor& bk, const Tensor& wv, const Tensor& bv,
                           const Tensor& wo, const Tensor& bo, bool causal,
                           AttentionCache* cache) {
  const Index d = wq.value.cols();
  if (d % heads != 0) throw ConfigError("attention: d not divisible by heads");
  const Index dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Index t = x.rows();

  Matrix q = linear(x, wq, bq);
  Matrix k = linear(x, wk, bk);
  Matrix v = linear(x, wv, bv);

  Matrix concat(t, d);
  std::vector<Matrix> probs(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    const auto qh = q.middleCols(h * dh, dh);
    const auto kh = k.middleCols(h * dh, dh);
    const auto vh = v.middleCols(h * dh, dh);
    Matrix s = qh * kh.transpose() * scale;
    Matrix a = softmax_rows(s, causal);
    concat.middleCols(h * dh, dh) = a * vh;
    probs[static_cast<std::size_t>(h)] = std::move(a);
  }
  Matrix out = linear(concat, wo, bo);
  if (cache) {
    cache->x = x;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->probs = std::move(probs);
    cache->concat = std::move(concat);
  }
  return out;
}

Matrix multihead_attention_backward(const Eigen::Ref<const Matrix>& dy,
                                    const AttentionCache& cache, int heads,
                                    Tensor& wq, Tensor& bq, Tensor& wk,
                                    Tensor& bk, Tensor& wv, Tensor& bv,
                                    Tensor& wo, Tensor& bo) {
  const Index d = wq.value.cols();
  const Index dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix dconcat = linear_backward(dy, cache.concat, wo, bo);

  Matrix dq(cache.q.rows(), d), dk(cache.k.rows(), d), dv(cache.v.rows(), d);
  for (int h = 0; h < heads; ++h) {
    const auto qh = cache.q.middleCols(h * dh, dh);
    const auto kh = cache.k.middleCols(h * dh, dh);
    const auto vh = cache.v.middleCols(h * dh, dh);
    const Matrix& a = cache.probs[static_cast<std::size_t>(h)];
    const auto doh = dconcat.middleCols(h * dh, dh);

    Matrix da = doh * vh.transpose();
    dv.middleCols(h * dh, dh) = a.transpose() * doh;
    Matrix ds = softmax_rows_backward(da, a);
    dq.middleCols(h * dh, dh) = ds * kh * scale;
    dk.middleCols(h * dh, dh) = ds.transpose() * qh * scale;
  }

  Matrix dx = linear_backward(dq, cache.x, wq, bq);
  dx += linear_backward(dk, cache.x, wk, bk);
  dx += linear_backward(dv, cache.x, wv, bv);
  return dx;
}

Matrix relu(const Eigen::Ref<const Matrix>& x) { return x.cwiseMax(0.0); }

Matrix relu_backward(const Eigen::Ref<const Matrix>& dy,
                     const Eigen::Ref<const Matrix>& x) {
  return (x.array() > 0.0).select(dy, Matrix::Zero(dy.rows(), dy.cols()));
}

Matrix dropout(const Eigen::Ref<const Matrix>& x, double rate, bool training,
               Rng& rng, DropoutCache* cache) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate out of [0,1)");
  if (!training || rate == 0.0) {
    if (cache) cache->mask = Matrix::Ones(x.rows(), x.cols());
    return x;
  }
  const double keep = 1.0 - rate;
  Matrix mask(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    for (Index j = 0; j < x.cols(); ++j) {
      mask(i, j) = rng.uniform() < rate ? 0.0 : 1.0 / keep;
    }
  }
  Matrix y = x.cwiseProduct(mask);
  if (cache) cache->mask = std::move(mask);
  return y;
}

Matrix dropout_backward(const Eigen::Ref<const Matrix>& dy,
                        const DropoutCache& cache) {
  return dy.cwiseProduct(cache.mask);
}

Matrix positional_encoding(Index t, Index d) {
  if (t < 1 || d < 1) throw ConfigError("positional_encoding: T, d must be >= 1");
  if (d % 2 != 0) throw ConfigError("positional_encoding: d must be even");
  Matrix pe(t, d);
  for (Index pos = 0; pos < t; ++pos) {
    for (Index i = 0; i < d / 2; ++i) {
      const double rate =
          std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(d));
      const double angle = static_cast<double>(pos) * rate;
      pe(pos, 2 * i) = std::sin(angle);
      pe(pos, 2 * i + 1) = std::cos(angle);
    }
  }
  return pe;
}

double focal_loss(const Eigen::Ref<const Vector>& logits,
                  const Eigen::Ref<const Vector>& soft_label, double gamma,
                  const Eigen::Ref<const Vector>& alpha, Vector* dlogits) {
  const Index c = logits.size();
  if (soft_label.size() != c || alpha.size() != c) {
    throw DimensionError("focal_loss: label/alpha size mismatch");
  }
  if (gamma < 0.0) throw ConfigError("focal_loss: gamma must be >= 0");

  const double m = logits.maxCoeff();
  Vector e = (logits.array() - m).exp();
  Vector p = e / e.sum();

  double loss = 0.0;
  Vector dl_dp = Vector::Zero(c);
  for (Index i = 0; i < c; ++i) {
    const double q = soft_label(i);
    const double pi = std::max(p(i), 1e-12);
    const double one_minus = 1.0 - p(i);
    const double focal = std::pow(one_minus, gamma);
    loss += q * alpha(i) * focal * -std::log(pi);
    if (dlogits) {
      double fprime;
      if (gamma == 0.0) {
        fprime = -1.0 / pi;
      } else {
        const double pow_gm1 = std::pow(std::max(one_minus, 1e-12), gamma - 1.0);
        fprime = gamma * pow_gm1 * std::log(pi) - focal / pi;
      }
      dl_dp(i) = q * alpha(i) * fprime;
    }
  }
  if (dlogits) {
    const double dot = dl_dp.dot(p);
    *dlogits = p.cwiseProduct(dl_dp.array().matrix() -
                              Vector::Constant(c, dot));
  }
  return loss;
}

}  // namespace multifuse::nn
