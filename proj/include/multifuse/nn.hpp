#pragma once

#include "multifuse/common.hpp"
#include "multifuse/rng.hpp"

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace multifuse::nn {

// One named parameter tensor with its gradient and AdamW moments. Vectors
// are 1 x n rows.
struct Tensor {
  std::string name;
  std::string group;  // optimizer/freezing group
  bool trainable = true;
  Matrix value;
  Matrix grad;
  Matrix m;
  Matrix v;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  Index size() const { return value.size(); }
};

// Owns every tensor of a model in registration order; that order fixes
// optimizer iteration, checkpoint layout, and flat coordinate addressing, so
// training stays bit-reproducible.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Index rows, Index cols,
              const std::string& group = "model");

  std::vector<std::unique_ptr<Tensor>>& tensors() { return tensors_; }
  const std::vector<std::unique_ptr<Tensor>>& tensors() const {
    return tensors_;
  }
  Tensor& find(const std::string& name);

  void zero_grad();
  double grad_norm() const;
  // Scales all gradients so the global norm is at most max_norm.
  void clip_grad_norm(double max_norm);
  void scale_grad(double factor);

  Index trainable_parameters() const;
  Index total_parameters() const;

  // FNV-1a over the value bytes of every tensor in the group ("" = all).
  std::uint64_t checksum(const std::string& group = "") const;

  std::vector<Matrix> snapshot() const;
  void restore(const std::vector<Matrix>& values);

  // MPF1 file per tensor plus an index.json (name -> file, shape, group).
  void save(const std::filesystem::path& dir) const;
  void load(const std::filesystem::path& dir);

 private:
  std::vector<std::unique_ptr<Tensor>> tensors_;
};

// Adaptive-moment gradient descent with decoupled weight decay.
struct AdamW {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  long step_count = 0;

  // group_lr overrides lr for tensors whose group it names.
  void step(ParamStore& params, double lr,
            const std::map<std::string, double>& group_lr = {});
};

void glorot_uniform(Tensor& t, Rng& rng);
void fill_normal(Tensor& t, double stddev, Rng& rng);

// --- stateless layers; backward accumulates parameter grads and returns the
// --- input gradient.

// x: T x d_in, w: d_in x d_out, b: 1 x d_out
Matrix linear(const Eigen::Ref<const Matrix>& x, const Tensor& w,
              const Tensor& b);
Matrix linear_backward(const Eigen::Ref<const Matrix>& dy,
                       const Eigen::Ref<const Matrix>& x, Tensor& w, Tensor& b);

struct LayerNormCache {
  Matrix xhat;
  Vector inv_std;
};

constexpr double kLayerNormEps = 1e-5;

// Row-wise normalization then scale/bias (gamma, beta are 1 x d).
Matrix layer_norm(const Eigen::Ref<const Matrix>& x, const Tensor& gamma,
                  const Tensor& beta, LayerNormCache* cache);
Matrix layer_norm_backward(const Eigen::Ref<const Matrix>& dy,
                           const LayerNormCache& cache, Tensor& gamma,
                           Tensor& beta);

// Row softmax; when causal, row i normalizes over columns 0..i only and
// later columns are exactly zero.
Matrix softmax_rows(const Eigen::Ref<const Matrix>& scores,
                    bool causal = false);
// dScores from dProbs; masked entries stay exactly zero because p is zero
// there.
Matrix softmax_rows_backward(const Eigen::Ref<const Matrix>& dp,
                             const Eigen::Ref<const Matrix>& p);

struct AttentionCache {
  Matrix x;
  Matrix q, k, v;            // T x d
  std::vector<Matrix> probs;  // per-head T x T attention
  Matrix concat;             // T x d before the output projection
};

// Scaled dot-product multi-head self-attention (scale 1/sqrt(d/heads)).
Matrix multihead_attention(const Eigen::Ref<const Matrix>& x, int heads,
                           const Tensor& wq, const Tensor& bq, const Tensor& wk,
                           const Tensor& bk, const Tensor& wv, const Tensor& bv,
                           const Tensor& wo, const Tensor& bo, bool causal,
                           AttentionCache* cache);
Matrix multihead_attention_backward(const Eigen::Ref<const Matrix>& dy,
                                    const AttentionCache& cache, int heads,
                                    Tensor& wq, Tensor& bq, Tensor& wk,
                                    Tensor& bk, Tensor& wv, Tensor& bv,
                                    Tensor& wo, Tensor& bo);

Matrix relu(const Eigen::Ref<const Matrix>& x);
Matrix relu_backward(const Eigen::Ref<const Matrix>& dy,
                     const Eigen::Ref<const Matrix>& x);

struct DropoutCache {
  Matrix mask;  // inverted scaling baked in
};

Matrix dropout(const Eigen::Ref<const Matrix>& x, double rate, bool training,
               Rng& rng, DropoutCache* cache);
Matrix dropout_backward(const Eigen::Ref<const Matrix>& dy,
                        const DropoutCache& cache);

// Sinusoidal table: PE(t, 2i) = sin(t / 10000^(2i/d)), PE(t, 2i+1) = cos(...).
// d must be even.
Matrix positional_encoding(Index t, Index d);

// Focal loss over soft labels: sum_c q_c * alpha_c * (1-p_c)^gamma * -log p_c
// with p = softmax(logits). gamma = 0, alpha = 1 reduces to cross-entropy.
// Fills dlogits when non-null.
double focal_loss(const Eigen::Ref<const Vector>& logits,
                  const Eigen::Ref<const Vector>& soft_label, double gamma,
                  const Eigen::Ref<const Vector>& alpha,
                  Vector* dlogits = nullptr);

}  // namespace multifuse::nn
