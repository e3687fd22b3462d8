#pragma once

#include "multifuse/common.hpp"
#include "multifuse/dataset.hpp"
#include "multifuse/nn.hpp"
#include "multifuse/rng.hpp"

#include <map>
#include <string>
#include <vector>

namespace multifuse::llm {

struct LlmConfig {
  Index embed_dim = 64;  // decoder embedding dim (paper-scale backbones use 4096)
  int layers = 2;
  int heads = 4;
  int lora_rank = 4;
  double lora_alpha = 8.0;
  double lr_stage1 = 5e-5;
  int epochs_stage1 = 5;
  double lr_lora = 1e-5;
  double lr_proj = 5e-5;
  int epochs_stage2 = 3;
  int batch_size = 4;
  bool pooled_tokens = false;  // one pseudo-token per modality instead of per frame
  std::uint64_t seed = 0;

  void validate() const;
};

// Fixed multiple-choice template; rendering is a pure function of the task's
// option list.
std::string build_prompt(const data::DatasetManifest& manifest,
                         const std::string& task);

// Multi-word option names collapse to single answer tokens ("Very Severe" ->
// "very_severe").
std::string canonical_option_token(const std::string& option_name);

// Word-level tokenizer over the prompt-template lexicon plus the task's
// option tokens.
class Tokenizer {
 public:
  Tokenizer() = default;
  explicit Tokenizer(const std::vector<std::string>& option_names);

  std::vector<int> encode(const std::string& text) const;
  const std::string& word(int id) const;
  int option_id(int class_index) const;
  int vocab_size() const { return static_cast<int>(vocab_.size()); }
  std::string decode(const std::vector<int>& ids) const;

 private:
  int add_word(const std::string& w);

  std::vector<std::string> vocab_;
  std::map<std::string, int> ids_;
  std::vector<int> option_ids_;
  std::vector<std::string> option_names_;
};

// Case-insensitive first occurrence of any option name; longest match wins at
// equal positions. Returns -1 when nothing matches (caller applies the
// fallback class and counts it as unparsed).
int decode_answer(const std::string& text,
                  const std::vector<std::string>& option_names);

// Low-rank adapter handles around a base tensor: effective weight is
// W + (alpha/r) * (B*A) in the spec's d_out x d_in orientation; tensors here
// store the transposed layout to match the row-vector linear convention.
struct LoraLayer {
  nn::Tensor* base = nullptr;
  nn::Tensor* a = nullptr;  // r x d_in, small random
  nn::Tensor* b = nullptr;  // d_out x r, zeros
  double scaling = 0.0;
  int rank = 0;

  bool active() const { return a != nullptr; }
  Index trainable_parameters() const {
    return active() ? a->size() + b->size() : 0;
  }
};

class ToyLlm {
 public:
  ToyLlm(const data::DatasetManifest& manifest, const std::string& task,
         const LlmConfig& cfg);

  // Vocab logits at the final position of [pseudo-tokens, prompt]; the
  // classification readout restricts these to the option tokens.
  Vector answer_logits(const data::Sample& s) const;
  int classify(const data::Sample& s) const;
  // Greedy generation of max_new tokens after the prompt.
  std::string generate(const data::Sample& s, int max_new = 6) const;

  // Per-frame (or pooled) projections of each modality into the embedding
  // space; order: audio tokens, visual tokens, text token.
  Matrix project_features(const data::Sample& s) const;

  // Full-sequence logits for a given pseudo-token + prompt assembly; used by
  // causality checks.
  Matrix all_logits(const data::Sample& s) const;

  // Next-token cross-entropy on the answer token. The backward variant
  // accumulates parameter gradients.
  double sample_loss(const data::Sample& s) const;
  double sample_loss_backward(const data::Sample& s);

  void stage1_train(const data::Dataset& train_set);
  void stage2_train(const data::Dataset& train_set);
  // Wraps every block's query/value projection; stage2_train calls this, and
  // checkpoint loading needs it to rebuild the stage-2 tensor layout.
  void inject_lora();
  bool lora_injected() const { return !lora_.empty(); }
  const std::vector<LoraLayer>& lora_layers() const { return lora_; }

  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  const Tokenizer& tokenizer() const { return tok_; }
  const LlmConfig& config() const { return cfg_; }
  const std::string& task() const { return task_; }
  const std::vector<int>& prompt_ids() const { return prompt_ids_; }
  int num_classes() const { return static_cast<int>(option_names_.size()); }

 private:
  struct Block {
    nn::Tensor *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
    nn::Tensor *ln1_g, *ln1_b;
    nn::Tensor *ff_w1, *ff_b1, *ff_w2, *ff_b2;
    nn::Tensor *ln2_g, *ln2_b;
  };

  struct BlockCache {
    Matrix input;
    Matrix q, k, v;
    std::vector<Matrix> probs;
    Matrix concat;
    nn::DropoutCache unused;
    nn::LayerNormCache ln1;
    Matrix x1, ff_pre, ff_act;
    nn::LayerNormCache ln2;
  };

  struct ForwardCache {
    Matrix pseudo;    // projected modality tokens
    Matrix embedded;  // full input sequence
    std::vector<BlockCache> blocks;
    Matrix final;
  };

  Matrix assemble(const data::Sample& s, ForwardCache* cache) const;
  Matrix decoder_forward(const Eigen::Ref<const Matrix>& seq,
                         ForwardCache* cache) const;
  // Returns the gradient w.r.t. the embedded sequence.
  Matrix decoder_backward(const Eigen::Ref<const Matrix>& dfinal,
                          const ForwardCache& cache);

  Matrix lora_forward(const Block& blk, int which,
                      const Eigen::Ref<const Matrix>& x) const;

  double train_epoch(const data::Dataset& train_set, nn::AdamW& opt, double lr,
                     const std::map<std::string, double>& group_lr, Rng& rng);

  LlmConfig cfg_;
  std::string task_;
  std::vector<std::string> option_names_;
  Tokenizer tok_;
  std::vector<int> prompt_ids_;
  Index d_audio_, d_visual_, d_text_;

  nn::ParamStore params_;
  nn::Tensor* embed_;
  std::vector<Block> blocks_;
  nn::Tensor *head_w_, *head_b_;
  nn::Tensor *proj_a_w_, *proj_a_b_, *proj_v_w_, *proj_v_b_, *proj_t_w_, *proj_t_b_;
  std::vector<LoraLayer> lora_;  // q and v per block once injected
  bool stage1_done_ = false;
};

// Standalone wrap used by tests and by stage-2 injection: B zero-init makes
// the wrapped layer an exact identity of the base at initialization.
LoraLayer lora_wrap(nn::ParamStore& store, nn::Tensor& base, int rank,
                    double alpha, Rng& rng, const std::string& name);

}  // namespace multifuse::llm
