#include "krcap/model.hpp"

#include <cmath>
#include <limits>

#include "krcap/errors.hpp"
#include "krcap/rng.hpp"

namespace krcap {

void validate_config(const ModelConfig& c) {
  if (c.d_model < 1 || c.n_heads < 1 || c.n_enc_layers < 1 || c.n_dec_layers < 1 ||
      c.d_ff < 1 || c.grid_h < 1 || c.grid_w < 1 || c.d_patch < 1 || c.n_psa_layers < 1)
    throw ConfigError("model config: all dimensions must be >= 1");
  if (c.d_model % c.n_heads != 0)
    throw ConfigError("model config: d_model must be divisible by n_heads");
  if (c.max_len < 2) throw ConfigError("model config: max_len must be >= 2");
  if (c.vocab_size < 5)
    throw ConfigError("model config: vocab_size must be >= 5 (specials plus content)");
}

namespace {

void push_attention(std::vector<ParamShape>& shapes, const std::string& prefix, int d) {
  for (const char* w : {"wq", "wk", "wv", "wo"})
    shapes.push_back({prefix + "." + w, d, d});
  for (const char* b : {"bq", "bk", "bv", "bo"})
    shapes.push_back({prefix + "." + b, 1, d});
}

void push_layer_norm(std::vector<ParamShape>& shapes, const std::string& prefix, int d) {
  shapes.push_back({prefix + ".g", 1, d});
  shapes.push_back({prefix + ".b", 1, d});
}

void push_ff(std::vector<ParamShape>& shapes, const std::string& prefix, int d, int d_ff) {
  shapes.push_back({prefix + ".w1", d, d_ff});
  shapes.push_back({prefix + ".b1", 1, d_ff});
  shapes.push_back({prefix + ".w2", d_ff, d});
  shapes.push_back({prefix + ".b2", 1, d});
}

}  // namespace

std::vector<ParamShape> param_shapes(const ModelConfig& c) {
  std::vector<ParamShape> s;
  int d = c.d_model;
  s.push_back({"patch_proj.w", c.d_patch, d});
  s.push_back({"patch_proj.b", 1, d});
  s.push_back({"patch_pos", c.grid_h * c.grid_w, d});
  if (c.use_patch_self_attention) {
    for (int i = 0; i < c.n_psa_layers; ++i) {
      std::string p = "psa." + std::to_string(i);
      push_layer_norm(s, p + ".ln", d);
      push_attention(s, p + ".attn", d);
    }
  }
  for (int i = 0; i < c.n_enc_layers; ++i) {
    std::string p = "enc." + std::to_string(i);
    push_layer_norm(s, p + ".ln1", d);
    push_attention(s, p + ".attn", d);
    push_layer_norm(s, p + ".ln2", d);
    push_ff(s, p + ".ff", d, c.d_ff);
  }
  push_layer_norm(s, "enc_final_ln", d);
  s.push_back({"tok_embed", c.vocab_size, d});
  s.push_back({"tok_pos", c.max_len, d});
  for (int i = 0; i < c.n_dec_layers; ++i) {
    std::string p = "dec." + std::to_string(i);
    push_layer_norm(s, p + ".ln1", d);
    push_attention(s, p + ".self", d);
    push_layer_norm(s, p + ".ln2", d);
    push_attention(s, p + ".cross", d);
    push_layer_norm(s, p + ".ln3", d);
    push_ff(s, p + ".ff", d, c.d_ff);
  }
  push_layer_norm(s, "dec_final_ln", d);
  s.push_back({"out_proj.w", d, c.vocab_size});
  s.push_back({"out_proj.b", 1, c.vocab_size});
  return s;
}

void Model::rebuild_index() {
  index_.clear();
  for (int i = 0; i < static_cast<int>(params.size()); ++i)
    index_[params[i].first] = i;
}

Tensor& Model::param(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("unknown parameter: " + name);
  return params[it->second].second;
}

const Tensor& Model::param(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("unknown parameter: " + name);
  return params[it->second].second;
}

Model make_model_skeleton(const ModelConfig& config) {
  validate_config(config);
  Model m;
  m.config = config;
  for (const ParamShape& s : param_shapes(config))
    m.params.emplace_back(s.name, Tensor(s.rows, s.cols));
  m.rebuild_index();
  return m;
}

Model init_model(const ModelConfig& config, uint64_t seed) {
  Model m = make_model_skeleton(config);
  Rng rng(seed);
  double bound = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  for (auto& [name, tensor] : m.params)
    for (double& v : tensor.a) v = rng.uniform(-bound, bound);
  return m;
}

Model clone_frozen(const Model& model) {
  Model copy = model;
  copy.frozen = true;
  return copy;
}

ad::Var BoundModel::p(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("unknown parameter: " + name);
  return vars[it->second];
}

BoundModel bind(ad::Tape& tape, const Model& model, bool differentiable) {
  if (differentiable && model.frozen) throw Error("teacher is frozen");
  BoundModel bm;
  bm.model = &model;
  bm.tape = &tape;
  bm.differentiable = differentiable;
  for (int i = 0; i < static_cast<int>(model.params.size()); ++i) {
    const auto& [name, tensor] = model.params[i];
    bm.vars.push_back(differentiable ? tape.leaf(tensor) : tape.constant(tensor));
    bm.index_[name] = i;
  }
  return bm;
}

namespace {

// Pre-norm multi-head attention: queries from q_in, keys/values from kv_in;
// mask (when present) is added to the score matrix before softmax.
ad::Var multi_head_attention(BoundModel& bm, const std::string& prefix, ad::Var q_in,
                             ad::Var kv_in, const Tensor* mask) {
  ad::Tape& t = *bm.tape;
  int d = bm.model->config.d_model;
  int heads = bm.model->config.n_heads;
  int dh = d / heads;
  double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  ad::Var q = t.add_rowvec(t.matmul(q_in, bm.p(prefix + ".wq")), bm.p(prefix + ".bq"));
  ad::Var k = t.add_rowvec(t.matmul(kv_in, bm.p(prefix + ".wk")), bm.p(prefix + ".bk"));
  ad::Var v = t.add_rowvec(t.matmul(kv_in, bm.p(prefix + ".wv")), bm.p(prefix + ".bv"));

  std::vector<ad::Var> head_outputs;
  for (int h = 0; h < heads; ++h) {
    ad::Var qh = t.slice_cols(q, h * dh, (h + 1) * dh);
    ad::Var kh = t.slice_cols(k, h * dh, (h + 1) * dh);
    ad::Var vh = t.slice_cols(v, h * dh, (h + 1) * dh);
    ad::Var scores = t.affine(t.matmul_nt(qh, kh), scale, 0.0);
    if (mask) scores = t.add_const(scores, *mask);
    head_outputs.push_back(t.matmul(t.row_softmax(scores), vh));
  }
  ad::Var merged = t.concat_cols(head_outputs);
  return t.add_rowvec(t.matmul(merged, bm.p(prefix + ".wo")), bm.p(prefix + ".bo"));
}

ad::Var pre_norm(BoundModel& bm, const std::string& ln_prefix, ad::Var x) {
  return bm.tape->layer_norm(x, bm.p(ln_prefix + ".g"), bm.p(ln_prefix + ".b"));
}

ad::Var self_attention_block(BoundModel& bm, const std::string& ln_prefix,
                             const std::string& attn_prefix, ad::Var x,
                             const Tensor* mask) {
  ad::Var h = pre_norm(bm, ln_prefix, x);
  return bm.tape->add(x, multi_head_attention(bm, attn_prefix, h, h, mask));
}

ad::Var cross_attention_block(BoundModel& bm, const std::string& ln_prefix,
                              const std::string& attn_prefix, ad::Var x,
                              ad::Var memory) {
  ad::Var h = pre_norm(bm, ln_prefix, x);
  return bm.tape->add(x, multi_head_attention(bm, attn_prefix, h, memory, nullptr));
}

ad::Var feed_forward_block(BoundModel& bm, const std::string& ln_prefix,
                           const std::string& ff_prefix, ad::Var x) {
  ad::Tape& t = *bm.tape;
  ad::Var h = pre_norm(bm, ln_prefix, x);
  ad::Var inner = t.gelu(
      t.add_rowvec(t.matmul(h, bm.p(ff_prefix + ".w1")), bm.p(ff_prefix + ".b1")));
  ad::Var out =
      t.add_rowvec(t.matmul(inner, bm.p(ff_prefix + ".w2")), bm.p(ff_prefix + ".b2"));
  return t.add(x, out);
}

// Strictly-upper-triangular -inf mask; exp(-inf) is exactly 0, so position r
// receives bitwise-zero contribution from positions > r.
Tensor causal_mask(int n) {
  Tensor m(n, n);
  double neg_inf = -std::numeric_limits<double>::infinity();
  for (int r = 0; r < n; ++r)
    for (int c = r + 1; c < n; ++c) m(r, c) = neg_inf;
  return m;
}

}  // namespace

ad::Var encode_image_g(BoundModel& bm, const Tensor& patches) {
  ad::Tape& t = *bm.tape;
  const ModelConfig& c = bm.model->config;
  if (patches.rows != c.grid_h * c.grid_w || patches.cols != c.d_patch)
    throw Error("encode_image: patch grid does not match model config");
  ad::Var x = t.add_rowvec(t.matmul(t.constant(patches), bm.p("patch_proj.w")),
                           bm.p("patch_proj.b"));
  x = t.add(x, bm.p("patch_pos"));
  if (c.use_patch_self_attention) {
    for (int i = 0; i < c.n_psa_layers; ++i) {
      std::string p = "psa." + std::to_string(i);
      x = self_attention_block(bm, p + ".ln", p + ".attn", x, nullptr);
    }
  }
  for (int i = 0; i < c.n_enc_layers; ++i) {
    std::string p = "enc." + std::to_string(i);
    x = self_attention_block(bm, p + ".ln1", p + ".attn", x, nullptr);
    x = feed_forward_block(bm, p + ".ln2", p + ".ff", x);
  }
  return t.layer_norm(x, bm.p("enc_final_ln.g"), bm.p("enc_final_ln.b"));
}

ad::Var decoder_logits_g(BoundModel& bm, ad::Var patch_states,
                         const TokenSequence& input_tokens) {
  ad::Tape& t = *bm.tape;
  const ModelConfig& c = bm.model->config;
  int m = static_cast<int>(input_tokens.size());
  if (m < 1) throw Error("decoder: empty input");
  if (m > c.max_len - 1) throw Error("decoder: sequence exceeds max_len");
  for (int id : input_tokens)
    if (id < 0 || id >= c.vocab_size) throw DataError("invalid token id");

  std::vector<int> positions(m);
  for (int i = 0; i < m; ++i) positions[i] = i;
  ad::Var x = t.add(t.gather_rows(bm.p("tok_embed"), input_tokens),
                    t.gather_rows(bm.p("tok_pos"), positions));
  Tensor mask = causal_mask(m);
  for (int i = 0; i < c.n_dec_layers; ++i) {
    std::string p = "dec." + std::to_string(i);
    x = self_attention_block(bm, p + ".ln1", p + ".self", x, &mask);
    x = cross_attention_block(bm, p + ".ln2", p + ".cross", x, patch_states);
    x = feed_forward_block(bm, p + ".ln3", p + ".ff", x);
  }
  x = t.layer_norm(x, bm.p("dec_final_ln.g"), bm.p("dec_final_ln.b"));
  return t.add_rowvec(t.matmul(x, bm.p("out_proj.w")), bm.p("out_proj.b"));
}

ad::Var forward_g(BoundModel& bm, ad::Var patch_states, const TokenSequence& tokens) {
  if (tokens.size() < 2) throw Error("forward: sequence needs at least BOS and EOS");
  if (static_cast<int>(tokens.size()) > bm.model->config.max_len)
    throw Error("forward: sequence exceeds max_len");
  TokenSequence inputs(tokens.begin(), tokens.end() - 1);
  return decoder_logits_g(bm, patch_states, inputs);
}

Tensor encode_image(const Model& model, const Tensor& patches) {
  ad::Tape t;
  BoundModel bm = bind(t, model, false);
  return t.value(encode_image_g(bm, patches));
}

LogitsMatrix decoder_logits(const Model& model, const Tensor& patch_states,
                            const TokenSequence& input_tokens) {
  ad::Tape t;
  BoundModel bm = bind(t, model, false);
  return t.value(decoder_logits_g(bm, t.constant(patch_states), input_tokens));
}

LogitsMatrix forward(const Model& model, const Tensor& patches,
                     const TokenSequence& tokens) {
  ad::Tape t;
  BoundModel bm = bind(t, model, false);
  return t.value(forward_g(bm, encode_image_g(bm, patches), tokens));
}

Gradients backward(BoundModel& bm, ad::Var loss) {
  if (bm.model->frozen) throw Error("teacher is frozen");
  if (!bm.differentiable) throw Error("backward: model was bound without gradients");
  bm.tape->backward(loss);
  Gradients grads;
  grads.reserve(bm.model->params.size());
  for (size_t i = 0; i < bm.model->params.size(); ++i)
    grads.emplace_back(bm.model->params[i].first, bm.tape->grad(bm.vars[i]));
  return grads;
}

}  // namespace krcap
