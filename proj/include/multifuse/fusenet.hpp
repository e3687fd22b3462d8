#pragma once

#include "multifuse/common.hpp"
#include "multifuse/dataset.hpp"
#include "multifuse/nn.hpp"
#include "multifuse/rng.hpp"

#include <optional>
#include <string>
#include <vector>

namespace multifuse::fusenet {

struct FusionConfig {
  Index latent_dim = 128;  // shared latent d; must divide by heads
  int layers = 2;
  int heads = 4;
  double dropout = 0.5;
  Index head_hidden1 = 512;
  Index head_hidden2 = 256;
  double learning_rate = 5e-5;
  int batch_size = 2;
  int max_epochs = 100;
  int patience = 20;
  int warmup_epochs = 10;
  double clip_norm = 1.0;
  double weight_decay = 1e-4;
  double focal_gamma = 2.0;
  // Per-class focal alpha; empty derives normalized inverse class frequency
  // from the training labels.
  std::vector<double> focal_alpha;
  bool use_mixup = true;
  double mixup_prob = 0.5;
  double mixup_beta = 0.2;
  bool use_positional_encoding = true;
  std::uint64_t seed = 0;

  void validate() const;
};

// Training view of one sample: raw modality features plus a soft label.
// Mixup pairs are zero-padded to the longer sequence per modality before
// interpolation, so a mixed sample is a plain full-length sequence.
struct MixedSample {
  Matrix audio;
  Matrix visual;
  Vector text;
  Vector soft_label;
  double lambda = 1.0;
  bool mixed = false;
};

MixedSample make_plain(const data::Sample& s, const std::string& task, int num_classes);
MixedSample mixup_with_lambda(const data::Sample& a, const data::Sample& b,
                              const std::string& task, int num_classes,
                              double lambda);
// With probability prob draws lambda ~ Beta(beta_param, beta_param) and mixes;
// otherwise returns the first sample unchanged.
MixedSample mixup(const data::Sample& a, const data::Sample& b,
                  const std::string& task, int num_classes, Rng& rng,
                  double prob, double beta_param);

// Softmax-weighted temporal pooling with a learned d-vector score.
// Returns (pooled, alpha).
std::pair<Vector, Vector> attention_pool(const Eigen::Ref<const Matrix>& h,
                                         const nn::Tensor& score);

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double dev_loss = 0.0;
  double dev_wf1 = 0.0;
  double dev_uf1 = 0.0;
  double lr = 0.0;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  int best_epoch = -1;
  double best_dev_wf1 = 0.0;

  std::string to_csv() const;
};

class FusionModel {
 public:
  FusionModel(Index audio_dim, Index visual_dim, Index text_dim,
              int num_classes, const FusionConfig& cfg);

  struct EncoderLayerCache {
    nn::AttentionCache attn;
    nn::DropoutCache attn_drop;
    nn::LayerNormCache ln1;
    Matrix x1;       // post-LN1 activations (FF input / residual source)
    Matrix ff_pre;   // x1 * W1 + b1
    Matrix ff_act;   // relu(ff_pre)
    nn::DropoutCache ff_drop;
    nn::LayerNormCache ln2;
  };

  struct ModalityCache {
    Matrix input;
    Matrix proj_pre;
    nn::LayerNormCache proj_ln;
    std::vector<EncoderLayerCache> layers;
    Matrix encoded;  // final T x d
    Vector alpha;
    Vector pooled;
  };

  struct Cache {
    ModalityCache audio;
    ModalityCache visual;
    Matrix text_in;  // 1 x d_t
    nn::LayerNormCache text_ln;
    Vector text_z;
    Vector fused;  // 3d
    Matrix h1_pre, h1_act, h1_normed, h1_dropped;
    nn::LayerNormCache h1_ln;
    nn::DropoutCache h1_drop;
    Matrix h2_pre, h2_act, h2_normed, h2_dropped;
    nn::LayerNormCache h2_ln;
    nn::DropoutCache h2_drop;
    Vector logits;
  };

  // training=true draws dropout masks from rng.
  Vector forward(const MixedSample& s, bool training, Rng& rng,
                 Cache* cache) const;
  Vector forward_eval(const MixedSample& s) const;
  // Accumulates parameter gradients; expects the cache from forward.
  void backward(const Cache& cache, const Vector& dlogits);

  std::vector<int> predict(const data::Dataset& ds,
                           const std::string& task) const;

  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  const FusionConfig& config() const { return cfg_; }
  int num_classes() const { return num_classes_; }
  Index audio_dim() const { return d_audio_; }
  Index visual_dim() const { return d_visual_; }
  Index text_dim() const { return d_text_; }

 private:
  struct EncoderLayerParams {
    nn::Tensor *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
    nn::Tensor *ln1_g, *ln1_b;
    nn::Tensor *ff_w1, *ff_b1, *ff_w2, *ff_b2;
    nn::Tensor *ln2_g, *ln2_b;
  };
  struct ModalityParams {
    nn::Tensor *proj_w, *proj_b, *ln_g, *ln_b;
    std::vector<EncoderLayerParams> layers;
    nn::Tensor* pool_score;
  };

  ModalityParams build_modality(const std::string& prefix, Index input_dim,
                                bool with_encoder);
  void init_weights();

  Matrix encode_modality(const ModalityParams& p,
                         const Eigen::Ref<const Matrix>& x, bool training,
                         Rng& rng, ModalityCache* cache) const;
  Matrix encode_modality_backward(const ModalityParams& p,
                                  const Eigen::Ref<const Matrix>& dh,
                                  const ModalityCache& cache);

  FusionConfig cfg_;
  int num_classes_;
  Index d_audio_, d_visual_, d_text_;
  nn::ParamStore params_;
  ModalityParams audio_, visual_;
  nn::Tensor *text_w_, *text_b_, *text_ln_g_, *text_ln_b_;
  nn::Tensor *head_w1_, *head_b1_, *head_ln1_g_, *head_ln1_b_;
  nn::Tensor *head_w2_, *head_b2_, *head_ln2_g_, *head_ln2_b_;
  nn::Tensor *head_w3_, *head_b3_;
};

// Trains with focal loss, optional mixup, linear warmup, global-norm
// clipping, AdamW, and weighted-F1 early stopping on dev. Deterministic for
// a fixed config seed.
FusionModel train(const data::Dataset& train_set, const data::Dataset& dev_set,
                  const std::string& task, const FusionConfig& cfg,
                  TrainHistory* history = nullptr);

// Max relative error between analytic and central-difference gradients over
// num_coords randomly chosen parameter coordinates. Build the model with
// dropout = 0 first; stochastic layers would decouple the two evaluations.
double grad_check(FusionModel& model, const std::vector<MixedSample>& batch,
                  double epsilon = 1e-5, int num_coords = 200,
                  std::uint64_t seed = 0);

}  // namespace multifuse::fusenet
