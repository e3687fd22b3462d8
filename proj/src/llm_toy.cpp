#include "multifuse/llm_toy.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <sstream>

namespace multifuse::llm {

void LlmConfig::validate() const {
  if (embed_dim < 2 || embed_dim % heads != 0 || embed_dim % 2 != 0) {
    throw ConfigError("llm: embed_dim must be even and divisible by heads");
  }
  if (layers < 1) throw ConfigError("llm: layers must be >= 1");
  if (lora_rank < 1) throw ConfigError("llm: lora_rank must be >= 1");
  if (batch_size < 1) throw ConfigError("llm: batch_size must be >= 1");
}

std::string canonical_option_token(const std::string& option_name) {
  std::string out;
  for (char c : option_name) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    } else if (!out.empty() && out.back() != '_') {
      out += '_';
    }
  }
  while (!out.empty() && out.back() == '_') out.pop_back();
  return out;
}

namespace {

const char* kInstruction =
    "You are reviewing the audio recording, facial cues and personal profile "
    "of one subject.";
const char* kQuestion =
    "Question: Based on the provided recordings, what is the subject's "
    "depression status?";
const char* kDirective = "Answer with exactly one option name. Answer:";

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '\'') {
      cur += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    } else if (!cur.empty()) {
      words.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(cur);
  return words;
}

std::string lower(const std::string& s) {
  std::string out = s;
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) {
    return static_cast<char>(std::tolower(c));
  });
  return out;
}

}  // namespace

std::string build_prompt(const data::DatasetManifest& manifest,
                         const std::string& task) {
  const auto& spec = manifest.task(task);  // throws on unknown task
  std::ostringstream os;
  os << kInstruction << " " << kQuestion << " Options: ";
  for (int c = 0; c < spec.num_classes(); ++c) {
    if (c) os << ", ";
    os << spec.class_names[static_cast<std::size_t>(c)];
  }
  os << ". " << kDirective;
  return os.str();
}

Tokenizer::Tokenizer(const std::vector<std::string>& option_names)
    : option_names_(option_names) {
  add_word("<unk>");
  for (const auto& name : option_names) {
    option_ids_.push_back(add_word(canonical_option_token(name)));
  }
  const std::string lexicon = std::string(kInstruction) + " " + kQuestion +
                              " Options: . " + kDirective;
  for (const auto& w : split_words(lexicon)) add_word(w);
}

int Tokenizer::add_word(const std::string& w) {
  auto it = ids_.find(w);
  if (it != ids_.end()) return it->second;
  const int id = static_cast<int>(vocab_.size());
  vocab_.push_back(w);
  ids_[w] = id;
  return id;
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
  // Collapse multi-word option names into their single answer tokens first.
  std::string prepared = text;
  std::string prepared_lower = lower(prepared);
  for (const auto& name : option_names_) {
    const std::string needle = lower(name);
    const std::string token = " " + canonical_option_token(name) + " ";
    std::size_t pos = 0;
    while ((pos = prepared_lower.find(needle, pos)) != std::string::npos) {
      prepared.replace(pos, needle.size(), token);
      prepared_lower.replace(pos, needle.size(), token);
      pos += token.size();
    }
  }
  std::vector<int> out;
  for (const auto& w : split_words(prepared)) {
    auto it = ids_.find(w);
    out.push_back(it == ids_.end() ? 0 : it->second);
  }
  return out;
}

const std::string& Tokenizer::word(int id) const {
  return vocab_.at(static_cast<std::size_t>(id));
}

int Tokenizer::option_id(int class_index) const {
  return option_ids_.at(static_cast<std::size_t>(class_index));
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
  std::ostringstream os;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) os << " ";
    os << word(ids[i]);
  }
  return os.str();
}

int decode_answer(const std::string& text,
                  const std::vector<std::string>& option_names) {
  const std::string hay = lower(text);
  // Longest names first so "very severe" beats "severe" at the same spot.
  std::vector<int> by_length(option_names.size());
  std::iota(by_length.begin(), by_length.end(), 0);
  std::sort(by_length.begin(), by_length.end(), [&](int a, int b) {
    return option_names[static_cast<std::size_t>(a)].size() >
           option_names[static_cast<std::size_t>(b)].size();
  });

  int best_class = -1;
  std::size_t best_pos = std::string::npos;
  for (int c : by_length) {
    std::string needle = lower(option_names[static_cast<std::size_t>(c)]);
    // The tokenizer may have rewritten multi-word names with underscores.
    std::replace(needle.begin(), needle.end(), ' ', '_');
    std::size_t pos = hay.find(needle);
    if (pos == std::string::npos) {
      std::string spaced = needle;
      std::replace(spaced.begin(), spaced.end(), '_', ' ');
      pos = hay.find(spaced);
    }
    if (pos != std::string::npos && pos < best_pos) {
      best_pos = pos;
      best_class = c;
    }
  }
  return best_class;
}

LoraLayer lora_wrap(nn::ParamStore& store, nn::Tensor& base, int rank,
                    double alpha, Rng& rng, const std::string& name) {
  const Index d_in = base.value.rows();
  const Index d_out = base.value.cols();
  if (rank < 1 || rank > std::min(d_in, d_out)) {
    throw ConfigError("lora_wrap: rank " + std::to_string(rank) +
                      " out of range for " + std::to_string(d_out) + "x" +
                      std::to_string(d_in));
  }
  LoraLayer layer;
  layer.base = &base;
  layer.a = &store.add(name + ".lora_a", rank, d_in, "lora");
  layer.b = &store.add(name + ".lora_b", d_out, rank, "lora");
  nn::fill_normal(*layer.a, 0.02, rng);
  layer.b->value.setZero();
  layer.scaling = alpha / static_cast<double>(rank);
  layer.rank = rank;
  return layer;
}

ToyLlm::ToyLlm(const data::DatasetManifest& manifest, const std::string& task,
               const LlmConfig& cfg)
    : cfg_(cfg), task_(task) {
  cfg_.validate();
  const auto& spec = manifest.task(task);
  option_names_ = spec.class_names;
  tok_ = Tokenizer(option_names_);
  prompt_ids_ = tok_.encode(build_prompt(manifest, task));
  d_audio_ = manifest.feature("audio").dim;
  d_visual_ = manifest.feature("visual").dim;
  d_text_ = manifest.feature("text").dim;

  const Index d = cfg_.embed_dim;
  embed_ = &params_.add("embed", tok_.vocab_size(), d, "backbone");
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string p = "block" + std::to_string(l);
    Block b;
    b.wq = &params_.add(p + ".wq", d, d, "backbone");
    b.bq = &params_.add(p + ".bq", 1, d, "backbone");
    b.wk = &params_.add(p + ".wk", d, d, "backbone");
    b.bk = &params_.add(p + ".bk", 1, d, "backbone");
    b.wv = &params_.add(p + ".wv", d, d, "backbone");
    b.bv = &params_.add(p + ".bv", 1, d, "backbone");
    b.wo = &params_.add(p + ".wo", d, d, "backbone");
    b.bo = &params_.add(p + ".bo", 1, d, "backbone");
    b.ln1_g = &params_.add(p + ".ln1_g", 1, d, "backbone");
    b.ln1_b = &params_.add(p + ".ln1_b", 1, d, "backbone");
    b.ff_w1 = &params_.add(p + ".ff_w1", d, 4 * d, "backbone");
    b.ff_b1 = &params_.add(p + ".ff_b1", 1, 4 * d, "backbone");
    b.ff_w2 = &params_.add(p + ".ff_w2", 4 * d, d, "backbone");
    b.ff_b2 = &params_.add(p + ".ff_b2", 1, d, "backbone");
    b.ln2_g = &params_.add(p + ".ln2_g", 1, d, "backbone");
    b.ln2_b = &params_.add(p + ".ln2_b", 1, d, "backbone");
    blocks_.push_back(b);
  }
  head_w_ = &params_.add("head.w", d, tok_.vocab_size(), "head");
  head_b_ = &params_.add("head.b", 1, tok_.vocab_size(), "head");
  proj_a_w_ = &params_.add("proj.audio.w", d_audio_, d, "projector");
  proj_a_b_ = &params_.add("proj.audio.b", 1, d, "projector");
  proj_v_w_ = &params_.add("proj.visual.w", d_visual_, d, "projector");
  proj_v_b_ = &params_.add("proj.visual.b", 1, d, "projector");
  proj_t_w_ = &params_.add("proj.text.w", d_text_, d, "projector");
  proj_t_b_ = &params_.add("proj.text.b", 1, d, "projector");

  Rng rng = Rng(cfg_.seed).substream("llm_init");
  for (auto& t : params_.tensors()) {
    if (t->name == "embed") {
      nn::fill_normal(*t, 0.1, rng);
    } else if (t->value.rows() == 1) {
      if (t->name.ends_with("_g")) {
        t->value.setOnes();
      } else {
        t->value.setZero();
      }
    } else {
      nn::glorot_uniform(*t, rng);
    }
  }
}

Matrix ToyLlm::project_features(const data::Sample& s) const {
  if (s.audio.dim() != d_audio_ || s.visual.dim() != d_visual_ ||
      s.text.size() != d_text_) {
    throw DimensionError("llm: sample feature dims do not match the manifest");
  }
  Matrix audio_in = s.audio.values;
  Matrix visual_in = s.visual.values;
  if (cfg_.pooled_tokens) {
    audio_in = s.audio.values.colwise().mean();
    visual_in = s.visual.values.colwise().mean();
  }
  Matrix pa = nn::linear(audio_in, *proj_a_w_, *proj_a_b_);
  Matrix pv = nn::linear(visual_in, *proj_v_w_, *proj_v_b_);
  Matrix pt = nn::linear(s.text.transpose(), *proj_t_w_, *proj_t_b_);
  Matrix out(pa.rows() + pv.rows() + 1, cfg_.embed_dim);
  out << pa, pv, pt;
  return out;
}

Matrix ToyLlm::assemble(const data::Sample& s, ForwardCache* cache) const {
  Matrix pseudo = project_features(s);
  const Index t_prompt = static_cast<Index>(prompt_ids_.size());
  Matrix seq(pseudo.rows() + t_prompt, cfg_.embed_dim);
  seq.topRows(pseudo.rows()) = pseudo;
  for (Index i = 0; i < t_prompt; ++i) {
    seq.row(pseudo.rows() + i) =
        embed_->value.row(prompt_ids_[static_cast<std::size_t>(i)]);
  }
  seq += nn::positional_encoding(seq.rows(), cfg_.embed_dim);
  if (cache) {
    cache->pseudo = pseudo;
    cache->embedded = seq;
  }
  return seq;
}

Matrix ToyLlm::lora_forward(const Block& blk, int which,
                            const Eigen::Ref<const Matrix>& x) const {
  // which: 0 = query, 1 = value.
  const nn::Tensor* w = which == 0 ? blk.wq : blk.wv;
  const nn::Tensor* bias = which == 0 ? blk.bq : blk.bv;
  Matrix y = nn::linear(x, *w, *bias);
  if (!lora_.empty()) {
    // Lora layers are stored q0, v0, q1, v1, ...
    std::size_t block_index = 0;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      if (&blocks_[i] == &blk) block_index = i;
    }
    const LoraLayer& l = lora_[2 * block_index + static_cast<std::size_t>(which)];
    y += l.scaling * (x * l.a->value.transpose()) * l.b->value.transpose();
  }
  return y;
}

Matrix ToyLlm::decoder_forward(const Eigen::Ref<const Matrix>& seq,
                               ForwardCache* cache) const {
  const Index d = cfg_.embed_dim;
  const Index dh = d / cfg_.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix h = seq;
  if (cache) cache->blocks.resize(blocks_.size());
  for (std::size_t li = 0; li < blocks_.size(); ++li) {
    const Block& blk = blocks_[li];
    BlockCache* bc = cache ? &cache->blocks[li] : nullptr;

    Matrix q = lora_forward(blk, 0, h);
    Matrix k = nn::linear(h, *blk.wk, *blk.bk);
    Matrix v = lora_forward(blk, 1, h);

    const Index t = h.rows();
    Matrix concat(t, d);
    std::vector<Matrix> probs(static_cast<std::size_t>(cfg_.heads));
    for (int hd = 0; hd < cfg_.heads; ++hd) {
      Matrix s = q.middleCols(hd * dh, dh) * k.middleCols(hd * dh, dh).transpose() * scale;
      Matrix a = nn::softmax_rows(s, /*causal=*/true);
      concat.middleCols(hd * dh, dh) = a * v.middleCols(hd * dh, dh);
      probs[static_cast<std::size_t>(hd)] = std::move(a);
    }
    Matrix attn = nn::linear(concat, *blk.wo, *blk.bo);
    Matrix res1 = h + attn;
    Matrix x1 = nn::layer_norm(res1, *blk.ln1_g, *blk.ln1_b, bc ? &bc->ln1 : nullptr);

    Matrix ff_pre = nn::linear(x1, *blk.ff_w1, *blk.ff_b1);
    Matrix ff_act = nn::relu(ff_pre);
    Matrix ff_out = nn::linear(ff_act, *blk.ff_w2, *blk.ff_b2);
    Matrix res2 = x1 + ff_out;
    Matrix x2 = nn::layer_norm(res2, *blk.ln2_g, *blk.ln2_b, bc ? &bc->ln2 : nullptr);

    if (bc) {
      bc->input = h;
      bc->q = std::move(q);
      bc->k = std::move(k);
      bc->v = std::move(v);
      bc->probs = std::move(probs);
      bc->concat = std::move(concat);
      bc->x1 = std::move(x1);
      bc->ff_pre = std::move(ff_pre);
      bc->ff_act = std::move(ff_act);
      h = std::move(x2);
    } else {
      h = std::move(x2);
    }
  }
  if (cache) cache->final = h;
  return h;
}

Matrix ToyLlm::decoder_backward(const Eigen::Ref<const Matrix>& dfinal,
                                const ForwardCache& cache) {
  const Index d = cfg_.embed_dim;
  const Index dh = d / cfg_.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix dhh = dfinal;
  for (std::size_t li = blocks_.size(); li-- > 0;) {
    const Block& blk = blocks_[li];
    const BlockCache& bc = cache.blocks[li];

    Matrix dres2 = nn::layer_norm_backward(dhh, bc.ln2, *blk.ln2_g, *blk.ln2_b);
    Matrix dx1 = dres2;
    Matrix dff_act = nn::linear_backward(dres2, bc.ff_act, *blk.ff_w2, *blk.ff_b2);
    Matrix dff_pre = nn::relu_backward(dff_act, bc.ff_pre);
    dx1 += nn::linear_backward(dff_pre, bc.x1, *blk.ff_w1, *blk.ff_b1);

    Matrix dres1 = nn::layer_norm_backward(dx1, bc.ln1, *blk.ln1_g, *blk.ln1_b);
    Matrix dattn = dres1;
    dhh = dres1;  // residual branch

    Matrix dconcat = nn::linear_backward(dattn, bc.concat, *blk.wo, *blk.bo);
    Matrix dq(bc.q.rows(), d), dk(bc.k.rows(), d), dv(bc.v.rows(), d);
    for (int hd = 0; hd < cfg_.heads; ++hd) {
      const auto qh = bc.q.middleCols(hd * dh, dh);
      const auto kh = bc.k.middleCols(hd * dh, dh);
      const auto vh = bc.v.middleCols(hd * dh, dh);
      const Matrix& a = bc.probs[static_cast<std::size_t>(hd)];
      const auto doh = dconcat.middleCols(hd * dh, dh);
      Matrix da = doh * vh.transpose();
      dv.middleCols(hd * dh, dh) = a.transpose() * doh;
      Matrix ds = nn::softmax_rows_backward(da, a);
      dq.middleCols(hd * dh, dh) = ds * kh * scale;
      dk.middleCols(hd * dh, dh) = ds.transpose() * qh * scale;
    }

    // Query/value may carry LoRA adapters.
    auto lora_linear_backward = [&](const Matrix& dy, int which) -> Matrix {
      nn::Tensor* w = which == 0 ? blk.wq : blk.wv;
      nn::Tensor* bias = which == 0 ? blk.bq : blk.bv;
      Matrix dx = nn::linear_backward(dy, bc.input, *w, *bias);
      if (!lora_.empty()) {
        LoraLayer& l = lora_[2 * li + static_cast<std::size_t>(which)];
        const Matrix xa = bc.input * l.a->value.transpose();  // T x r
        l.b->grad += l.scaling * dy.transpose() * xa;
        l.a->grad += l.scaling * (dy * l.b->value).transpose() * bc.input;
        dx += l.scaling * (dy * l.b->value) * l.a->value;
      }
      return dx;
    };

    dhh += lora_linear_backward(dq, 0);
    dhh += nn::linear_backward(dk, bc.input, *blk.wk, *blk.bk);
    dhh += lora_linear_backward(dv, 1);
  }
  return dhh;
}

Matrix ToyLlm::all_logits(const data::Sample& s) const {
  Matrix seq = assemble(s, nullptr);
  Matrix final = decoder_forward(seq, nullptr);
  return nn::linear(final, *head_w_, *head_b_);
}

Vector ToyLlm::answer_logits(const data::Sample& s) const {
  Matrix seq = assemble(s, nullptr);
  Matrix final = decoder_forward(seq, nullptr);
  Matrix last = final.bottomRows(1);
  return nn::linear(last, *head_w_, *head_b_).row(0).transpose();
}

int ToyLlm::classify(const data::Sample& s) const {
  const Vector logits = answer_logits(s);
  int best = 0;
  double best_v = logits(tok_.option_id(0));
  for (int c = 1; c < num_classes(); ++c) {
    const double v = logits(tok_.option_id(c));
    if (v > best_v) {
      best_v = v;
      best = c;
    }
  }
  return best;
}

std::string ToyLlm::generate(const data::Sample& s, int max_new) const {
  Matrix seq = assemble(s, nullptr);
  std::vector<int> out_ids;
  for (int step = 0; step < max_new; ++step) {
    Matrix final = decoder_forward(seq, nullptr);
    Vector logits =
        nn::linear(final.bottomRows(1), *head_w_, *head_b_).row(0).transpose();
    Index next = 0;
    logits.maxCoeff(&next);
    out_ids.push_back(static_cast<int>(next));
    // Append the embedding of the generated token; positions shift, so the
    // whole table is rebuilt.
    Matrix grown(seq.rows() + 1, cfg_.embed_dim);
    grown.topRows(seq.rows()) =
        seq - nn::positional_encoding(seq.rows(), cfg_.embed_dim);
    grown.row(seq.rows()) = embed_->value.row(next);
    grown += nn::positional_encoding(grown.rows(), cfg_.embed_dim);
    seq = std::move(grown);
  }
  return tok_.decode(out_ids);
}

namespace {

void set_group_trainable(nn::ParamStore& params, const std::string& group,
                         bool trainable) {
  for (auto& t : params.tensors()) {
    if (t->group == group) t->trainable = trainable;
  }
}

}  // namespace

double ToyLlm::sample_loss(const data::Sample& s) const {
  const int answer = tok_.option_id(s.label(task_));
  const Vector logits = answer_logits(s);
  const double m = logits.maxCoeff();
  const double lse = m + std::log((logits.array() - m).exp().sum());
  return lse - logits(answer);
}

double ToyLlm::sample_loss_backward(const data::Sample& s) {
  const int answer = tok_.option_id(s.label(task_));

  ForwardCache cache;
  assemble(s, &cache);
  decoder_forward(cache.embedded, &cache);
  Matrix last = cache.final.bottomRows(1);
  Vector logits = nn::linear(last, *head_w_, *head_b_).row(0).transpose();

  // Next-token cross-entropy on the answer token only.
  Vector onehot = Vector::Zero(tok_.vocab_size());
  onehot(answer) = 1.0;
  Vector dlogits;
  const double loss = nn::focal_loss(logits, onehot, 0.0,
                                     Vector::Ones(tok_.vocab_size()), &dlogits);
  if (!std::isfinite(loss)) {
    throw TrainError("llm training diverged");
  }

  Matrix dlast = dlogits.transpose();
  Matrix dfinal_last = nn::linear_backward(dlast, last, *head_w_, *head_b_);
  Matrix dfinal = Matrix::Zero(cache.final.rows(), cache.final.cols());
  dfinal.bottomRows(1) = dfinal_last;
  Matrix dseq = decoder_backward(dfinal, cache);

  // Pseudo-token gradients flow into the projectors; prompt-token rows into
  // the (frozen) embedding table.
  const Index t_pseudo = cache.pseudo.rows();
  Matrix audio_in = cfg_.pooled_tokens ? Matrix(s.audio.values.colwise().mean())
                                       : s.audio.values;
  Matrix visual_in = cfg_.pooled_tokens
                         ? Matrix(s.visual.values.colwise().mean())
                         : s.visual.values;
  const Index ta = audio_in.rows();
  const Index tv = visual_in.rows();
  nn::linear_backward(dseq.topRows(ta), audio_in, *proj_a_w_, *proj_a_b_);
  nn::linear_backward(dseq.middleRows(ta, tv), visual_in, *proj_v_w_, *proj_v_b_);
  nn::linear_backward(dseq.middleRows(ta + tv, 1), s.text.transpose(),
                      *proj_t_w_, *proj_t_b_);
  for (Index i = t_pseudo; i < dseq.rows(); ++i) {
    embed_->grad.row(prompt_ids_[static_cast<std::size_t>(i - t_pseudo)]) +=
        dseq.row(i);
  }
  return loss;
}

double ToyLlm::train_epoch(const data::Dataset& train_set, nn::AdamW& opt,
                           double lr,
                           const std::map<std::string, double>& group_lr,
                           Rng& rng) {
  const Index n = train_set.size();
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  rng.shuffle(order);

  double total_loss = 0.0;
  for (Index start = 0; start < n; start += cfg_.batch_size) {
    const Index batch_end = std::min<Index>(n, start + cfg_.batch_size);
    params_.zero_grad();
    for (Index bi = start; bi < batch_end; ++bi) {
      total_loss += sample_loss_backward(
          train_set.samples[static_cast<std::size_t>(order[static_cast<std::size_t>(bi)])]);
    }
    params_.scale_grad(1.0 / static_cast<double>(batch_end - start));
    opt.step(params_, lr, group_lr);
  }
  return total_loss / static_cast<double>(n);
}

void ToyLlm::stage1_train(const data::Dataset& train_set) {
  if (train_set.size() < 1) throw DataError("llm stage1: empty training set");
  set_group_trainable(params_, "backbone", false);
  set_group_trainable(params_, "projector", true);
  set_group_trainable(params_, "head", true);
  if (params_.trainable_parameters() == 0) {
    throw ConfigError("llm stage1: no trainable parameters");
  }

  Rng rng = Rng(cfg_.seed).substream("llm_stage1");
  nn::AdamW opt;
  for (int epoch = 0; epoch < cfg_.epochs_stage1; ++epoch) {
    train_epoch(train_set, opt, cfg_.lr_stage1, {}, rng);
  }
  stage1_done_ = true;
}

void ToyLlm::inject_lora() {
  if (!lora_.empty()) return;
  Rng rng = Rng(cfg_.seed).substream("llm_lora_init");
  for (std::size_t li = 0; li < blocks_.size(); ++li) {
    lora_.push_back(lora_wrap(params_, *blocks_[li].wq, cfg_.lora_rank,
                              cfg_.lora_alpha, rng,
                              "block" + std::to_string(li) + ".wq"));
    lora_.push_back(lora_wrap(params_, *blocks_[li].wv, cfg_.lora_rank,
                              cfg_.lora_alpha, rng,
                              "block" + std::to_string(li) + ".wv"));
  }
}

void ToyLlm::stage2_train(const data::Dataset& train_set) {
  if (!stage1_done_) {
    throw ConfigError("llm stage2: run stage 1 first");
  }
  inject_lora();
  // Base weights and head freeze; adapters and projectors move, each at its
  // own rate.
  set_group_trainable(params_, "backbone", false);
  set_group_trainable(params_, "head", false);
  set_group_trainable(params_, "projector", true);
  set_group_trainable(params_, "lora", true);

  Rng rng = Rng(cfg_.seed).substream("llm_stage2");
  nn::AdamW opt;
  const std::map<std::string, double> group_lr = {{"lora", cfg_.lr_lora},
                                                  {"projector", cfg_.lr_proj}};
  for (int epoch = 0; epoch < cfg_.epochs_stage2; ++epoch) {
    train_epoch(train_set, opt, cfg_.lr_lora, group_lr, rng);
  }
}

}  // namespace multifuse::llm
