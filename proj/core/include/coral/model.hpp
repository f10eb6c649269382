#pragma once

// Dual-path network: per-modality encoders with latent converters, a fusion
// transformer over the concatenated token sequences (shared pathway, [CLS]
// readout), per-modality MLP + attention-pooling unique pathways, and
// projection heads into the common contrastive space. At inference the
// concatenation (Z_SR, Z_U1, ..., Z_Un) is the representation.

#include "coral/autodiff.hpp"
#include "coral/common.hpp"
#include "coral/masking.hpp"
#include "coral/rng.hpp"

#include <map>
#include <memory>
#include <string>
#include <vector>

namespace coral {

enum class UniqueVariant { MlpPoolHalf, MlpPoolSame };

inline std::string unique_variant_name(UniqueVariant v) {
  return v == UniqueVariant::MlpPoolHalf ? "mlp_pool_half" : "mlp_pool_same";
}
inline UniqueVariant unique_variant_from_name(const std::string& s) {
  if (s == "mlp_pool_half") return UniqueVariant::MlpPoolHalf;
  if (s == "mlp_pool_same") return UniqueVariant::MlpPoolSame;
  throw ConfigError("unknown unique_variant: " + s);
}

struct ModelConfig {
  int n_modalities = 2;
  std::vector<int> payload_dims = {30, 30};
  int tokens_per_modality = 4;  // L
  int d_tok = 64;
  int d_s = 64;  // shared embedding width; the [CLS] readout, so must equal d_tok
  int d_p = 64;
  int fusion_heads = 8;
  int fusion_layers = 1;
  int ffn_hidden = 128;
  int encoder_hidden = 64;
  UniqueVariant unique_variant = UniqueVariant::MlpPoolHalf;
  bool share_pathway_encoders = false;
  bool learnable_mask_token = false;

  int unique_dim() const {
    return unique_variant == UniqueVariant::MlpPoolHalf ? d_s / 2 : d_s;
  }
  int seq_len() const { return 1 + n_modalities * tokens_per_modality; }
  int z_dim() const { return d_s + n_modalities * unique_dim(); }

  void validate() const {
    require(n_modalities >= 1, "model: n_modalities must be >= 1");
    require(static_cast<int>(payload_dims.size()) == n_modalities,
            "model: payload_dims must list one dim per modality");
    for (int d : payload_dims) require(d >= 1, "model: payload dims must be >= 1");
    require(tokens_per_modality >= 1, "model: tokens_per_modality must be >= 1");
    require(d_s % 2 == 0, "model: d_s must be even");
    require(d_s == d_tok, "model: d_s must equal d_tok (z_sr is the [CLS] readout)");
    require(fusion_heads >= 1 && d_tok % fusion_heads == 0,
            "model: fusion_heads must divide d_tok");
    require(fusion_layers >= 1, "model: fusion_layers must be >= 1");
    require(ffn_hidden >= 1 && encoder_hidden >= 1 && d_p >= 1, "model: dims must be >= 1");
    require(encoder_hidden % tokens_per_modality == 0,
            "model: tokens_per_modality must divide encoder_hidden (chunk embedding)");
  }
};

struct HeadId {
  bool shared = true;
  int modality = -1;
  static HeadId Shared() { return {true, -1}; }
  static HeadId Unique(int i) { return {false, i}; }
};

enum class Pathway { Shared, Unique };

template <class S>
struct TokenSequence {
  ad::Var tokens;  // (n_samples * length) x d_tok
  int length = 0;
  int modality_id = 0;
};

/// One masking instruction inside a stacked forward pass: zero (or overwrite)
/// the listed token rows of one modality for samples in [sample_begin,
/// sample_end).
struct MaskSpec {
  int modality = 0;
  std::vector<int> token_indices;
  int sample_begin = 0;
  int sample_end = 0;
};

template <class S>
class Model {
 public:
  using Param = ad::Parameter<S>;
  using Mat = Matrix<S>;

  explicit Model(ModelConfig cfg, std::uint64_t init_seed = 0) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build();
    Rng rng = Rng::stream(init_seed, "model/init");
    init_params(rng);
  }

  const ModelConfig& config() const { return cfg_; }

  std::vector<Param*>& parameters() { return params_; }
  const std::vector<Param*>& parameters() const { return params_; }

  Param* find_param(const std::string& name) {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second;
  }

  void zero_grad() {
    for (Param* p : params_) p->zero_grad();
  }

  std::int64_t parameter_count(const std::string& prefix = "") const {
    std::int64_t n = 0;
    for (const Param* p : params_)
      if (p->name.rfind(prefix, 0) == 0) n += p->size();
    return n;
  }

  void set_trainable(const std::string& prefix, bool trainable) {
    for (Param* p : params_)
      if (p->name.rfind(prefix, 0) == 0) p->trainable = trainable;
  }

  // ---- pathway pieces ----

  /// Encoder then latent converter: the encoder output is split into L
  /// contiguous chunks and a shared linear chunk embedding lifts each to
  /// d_tok, so the L tokens carry complementary pieces of the modality and
  /// masking them hides real information.
  TokenSequence<S> encode_modality(ad::Tape<S>& t, ad::Var payload, int modality,
                                   Pathway pathway) {
    check_modality(modality);
    require(t.value(payload).cols() == cfg_.payload_dims[static_cast<std::size_t>(modality)],
            "encode_modality: payload width mismatch");
    const Enc& e = (pathway == Pathway::Shared || cfg_.share_pathway_encoders)
                       ? enc_shared_[static_cast<std::size_t>(modality)]
                       : enc_unique_[static_cast<std::size_t>(modality)];
    ad::Var h = t.gelu(t.add_rowvec(t.matmul(payload, t.param(*e.w1)), t.param(*e.b1)));
    const Eigen::Index n = t.value(payload).rows();
    const int L = cfg_.tokens_per_modality;
    ad::Var chunks = t.reshape(h, n * L, cfg_.encoder_hidden / L);
    ad::Var tokens = t.add_rowvec(t.matmul(chunks, t.param(*e.wc)), t.param(*e.bc));
    return {tokens, L, modality};
  }

  TokenSequence<S> encode_modality(ad::Tape<S>& t, const Mat& payload, int modality,
                                   Pathway pathway) {
    return encode_modality(t, t.input(payload), modality, pathway);
  }

  /// Shared pathway fusion on already-encoded sequences. masks carry the
  /// per-view token decisions; empty means inference behaviour.
  ad::Var fuse_shared(ad::Tape<S>& t, const std::vector<TokenSequence<S>>& seqs,
                      const std::vector<MaskSpec>& masks) {
    require(static_cast<int>(seqs.size()) == cfg_.n_modalities,
            "fuse_shared: expected one sequence per modality");
    const int L = cfg_.tokens_per_modality;
    const int d = cfg_.d_tok;
    const Eigen::Index n = t.value(seqs[0].tokens).rows() / L;

    std::vector<ad::Var> tok(seqs.size());
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      require(seqs[i].length == L, "fuse_shared: token count mismatch");
      tok[i] = seqs[i].tokens;
    }
    for (const MaskSpec& m : masks) {
      check_modality(m.modality);
      auto mi = static_cast<std::size_t>(m.modality);
      if (cfg_.learnable_mask_token) {
        tok[mi] = t.overwrite_token_rows(tok[mi], t.param(*mask_token_), L, m.token_indices,
                                         m.sample_begin, m.sample_end);
      } else {
        tok[mi] = t.zero_token_rows(tok[mi], L, m.token_indices, m.sample_begin, m.sample_end);
      }
    }

    // assemble [CLS | modality tokens...] in the per-sample flattened layout
    std::vector<ad::Var> cols;
    cols.push_back(t.broadcast_row(t.param(*cls_), n));
    for (std::size_t i = 0; i < tok.size(); ++i)
      cols.push_back(t.reshape(tok[i], n, static_cast<Eigen::Index>(L) * d));
    ad::Var seq = t.concat_cols(cols);

    std::vector<ad::Var> type_cols;
    type_cols.push_back(t.input(Mat::Zero(1, d)));  // CLS slot carries no type
    for (std::size_t i = 0; i < tok.size(); ++i)
      type_cols.push_back(t.tile_cols(t.param(*type_emb_[i]), L));
    seq = t.add_rowvec(seq, t.concat_cols(type_cols));
    seq = t.add_rowvec(seq, t.param(*pos_));

    const int T = cfg_.seq_len();
    ad::Var x = t.reshape(seq, n * T, d);
    for (const Block& blk : blocks_) {
      ad::Var ln1 = t.layer_norm(x, t.param(*blk.ln1_g), t.param(*blk.ln1_b));
      ad::Var q = t.add_rowvec(t.matmul(ln1, t.param(*blk.wq)), t.param(*blk.bq));
      ad::Var k = t.add_rowvec(t.matmul(ln1, t.param(*blk.wk)), t.param(*blk.bk));
      ad::Var v = t.add_rowvec(t.matmul(ln1, t.param(*blk.wv)), t.param(*blk.bv));
      ad::Var att = t.attention(q, k, v, static_cast<int>(n), T, cfg_.fusion_heads);
      x = t.add(x, t.add_rowvec(t.matmul(att, t.param(*blk.wo)), t.param(*blk.bo)));
      ad::Var ln2 = t.layer_norm(x, t.param(*blk.ln2_g), t.param(*blk.ln2_b));
      ad::Var f = t.gelu(t.add_rowvec(t.matmul(ln2, t.param(*blk.wf1)), t.param(*blk.bf1)));
      x = t.add(x, t.add_rowvec(t.matmul(f, t.param(*blk.wf2)), t.param(*blk.bf2)));
    }
    x = t.layer_norm(x, t.param(*ln_out_g_), t.param(*ln_out_b_));
    // z_sr is the transformer output at the [CLS] position
    return t.slice_cols(t.reshape(x, n, static_cast<Eigen::Index>(T) * d), 0, cfg_.d_s);
  }

  ad::Var fuse_shared(ad::Tape<S>& t, const std::vector<TokenSequence<S>>& seqs,
                      const masking::MaskPlan* plan) {
    std::vector<MaskSpec> masks;
    if (plan) {
      const Eigen::Index n = t.value(seqs.at(0).tokens).rows() / cfg_.tokens_per_modality;
      for (int mi : plan->masked_modalities()) {
        check_modality(mi);
        masks.push_back({mi, plan->masked_token_indices.at(mi), 0, static_cast<int>(n)});
      }
    }
    return fuse_shared(t, seqs, masks);
  }

  /// Unique pathway tail: token-wise 2-layer MLP down to the unique width,
  /// then attention pooling over each sample's tokens.
  ad::Var unique_from_tokens(ad::Tape<S>& t, const TokenSequence<S>& seq) {
    check_modality(seq.modality_id);
    const UniquePath& u = unique_[static_cast<std::size_t>(seq.modality_id)];
    const Eigen::Index n = t.value(seq.tokens).rows() / seq.length;
    ad::Var h = t.gelu(t.add_rowvec(t.matmul(seq.tokens, t.param(*u.w1)), t.param(*u.b1)));
    ad::Var m = t.add_rowvec(t.matmul(h, t.param(*u.w2)), t.param(*u.b2));
    ad::Var a = t.tanh_act(t.add_rowvec(t.matmul(m, t.param(*u.wa)), t.param(*u.ba)));
    ad::Var scores = t.matmul_nt(a, t.param(*u.va));
    return t.attn_pool(m, scores, static_cast<int>(n), seq.length);
  }

  ad::Var unique_path(ad::Tape<S>& t, ad::Var payload, int modality) {
    return unique_from_tokens(t, encode_modality(t, payload, modality, Pathway::Unique));
  }

  ad::Var project(ad::Tape<S>& t, ad::Var e, HeadId id) {
    const Head& h = head(id);
    require(t.value(e).cols() == h.w1->value.rows(), "project: embedding width mismatch");
    ad::Var z = t.gelu(t.add_rowvec(t.matmul(e, t.param(*h.w1)), t.param(*h.b1)));
    return t.add_rowvec(t.matmul(z, t.param(*h.w2)), t.param(*h.b2));
  }

  // ---- full passes ----

  struct Outputs {
    ad::Var z_sr;
    std::vector<ad::Var> z_u;
    ad::Var p_sr;
    std::vector<ad::Var> p_u;
  };

  /// Forward the dual-path network on per-modality payload matrices (rows may
  /// stack several views; masks address stacked sample indices). When
  /// with_projection is false the projected vars stay invalid.
  Outputs forward(ad::Tape<S>& t, const std::vector<ad::Var>& payloads,
                  const std::vector<MaskSpec>& masks, bool with_projection = true) {
    require(static_cast<int>(payloads.size()) == cfg_.n_modalities,
            "forward: expected one payload per modality");
    Outputs out;
    std::vector<TokenSequence<S>> shared_seqs;
    shared_seqs.reserve(payloads.size());
    for (int i = 0; i < cfg_.n_modalities; ++i)
      shared_seqs.push_back(encode_modality(t, payloads[static_cast<std::size_t>(i)], i,
                                            Pathway::Shared));
    out.z_sr = fuse_shared(t, shared_seqs, masks);
    for (int i = 0; i < cfg_.n_modalities; ++i)
      out.z_u.push_back(unique_path(t, payloads[static_cast<std::size_t>(i)], i));
    if (with_projection) {
      out.p_sr = project(t, out.z_sr, HeadId::Shared());
      for (int i = 0; i < cfg_.n_modalities; ++i)
        out.p_u.push_back(project(t, out.z_u[static_cast<std::size_t>(i)], HeadId::Unique(i)));
    }
    return out;
  }

  /// Inference: no augmentation, no masking, no projection heads. Returns
  /// Z = concat(z_sr, z_u_1, ..., z_u_n), one row per sample.
  Mat forward_inference(const std::vector<Mat>& payloads) {
    ad::Tape<S> t;
    std::vector<ad::Var> leaves;
    leaves.reserve(payloads.size());
    for (const Mat& p : payloads) leaves.push_back(t.input(p));
    Outputs out = forward(t, leaves, {}, false);
    std::vector<ad::Var> parts = {out.z_sr};
    for (ad::Var v : out.z_u) parts.push_back(v);
    return t.value(t.concat_cols(parts));
  }

 private:
  struct Enc {
    Param *w1, *b1, *wc, *bc;
  };
  struct Block {
    Param *ln1_g, *ln1_b, *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
    Param *ln2_g, *ln2_b, *wf1, *bf1, *wf2, *bf2;
  };
  struct UniquePath {
    Param *w1, *b1, *w2, *b2;  // token-wise MLP
    Param *wa, *ba, *va;       // attention pooling
  };
  struct Head {
    Param *w1, *b1, *w2, *b2;
  };

  void check_modality(int i) const {
    require(i >= 0 && i < cfg_.n_modalities, "modality index out of range");
  }

  const Head& head(HeadId id) const {
    if (id.shared) return head_shared_;
    require(id.modality >= 0 && id.modality < cfg_.n_modalities, "project: unknown head");
    return head_unique_[static_cast<std::size_t>(id.modality)];
  }

  Param* add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    owned_.push_back(std::make_unique<Param>(name, Mat::Zero(rows, cols)));
    Param* p = owned_.back().get();
    params_.push_back(p);
    by_name_[name] = p;
    return p;
  }

  Enc add_encoder(const std::string& prefix, int payload_dim) {
    Enc e;
    e.w1 = add(prefix + ".w1", payload_dim, cfg_.encoder_hidden);
    e.b1 = add(prefix + ".b1", 1, cfg_.encoder_hidden);
    e.wc = add(prefix + ".wc", cfg_.encoder_hidden / cfg_.tokens_per_modality, cfg_.d_tok);
    e.bc = add(prefix + ".bc", 1, cfg_.d_tok);
    return e;
  }

  void build() {
    const int d = cfg_.d_tok;
    for (int i = 0; i < cfg_.n_modalities; ++i) {
      const int pd = cfg_.payload_dims[static_cast<std::size_t>(i)];
      enc_shared_.push_back(add_encoder("encoder.shared." + std::to_string(i), pd));
      if (!cfg_.share_pathway_encoders)
        enc_unique_.push_back(add_encoder("encoder.unique." + std::to_string(i), pd));
    }
    cls_ = add("fusion.cls", 1, d);
    pos_ = add("fusion.pos", 1, static_cast<Eigen::Index>(cfg_.seq_len()) * d);
    for (int i = 0; i < cfg_.n_modalities; ++i)
      type_emb_.push_back(add("fusion.type." + std::to_string(i), 1, d));
    if (cfg_.learnable_mask_token) mask_token_ = add("fusion.mask_token", 1, d);
    for (int l = 0; l < cfg_.fusion_layers; ++l) {
      std::string p = "fusion.layer" + std::to_string(l);
      Block b;
      b.ln1_g = add(p + ".ln1.g", 1, d);
      b.ln1_b = add(p + ".ln1.b", 1, d);
      b.wq = add(p + ".attn.wq", d, d);
      b.bq = add(p + ".attn.bq", 1, d);
      b.wk = add(p + ".attn.wk", d, d);
      b.bk = add(p + ".attn.bk", 1, d);
      b.wv = add(p + ".attn.wv", d, d);
      b.bv = add(p + ".attn.bv", 1, d);
      b.wo = add(p + ".attn.wo", d, d);
      b.bo = add(p + ".attn.bo", 1, d);
      b.ln2_g = add(p + ".ln2.g", 1, d);
      b.ln2_b = add(p + ".ln2.b", 1, d);
      b.wf1 = add(p + ".ffn.w1", d, cfg_.ffn_hidden);
      b.bf1 = add(p + ".ffn.b1", 1, cfg_.ffn_hidden);
      b.wf2 = add(p + ".ffn.w2", cfg_.ffn_hidden, d);
      b.bf2 = add(p + ".ffn.b2", 1, d);
      blocks_.push_back(b);
    }
    ln_out_g_ = add("fusion.ln_out.g", 1, d);
    ln_out_b_ = add("fusion.ln_out.b", 1, d);
    const int ud = cfg_.unique_dim();
    for (int i = 0; i < cfg_.n_modalities; ++i) {
      std::string p = "unique." + std::to_string(i);
      UniquePath u;
      u.w1 = add(p + ".mlp.w1", d, d);
      u.b1 = add(p + ".mlp.b1", 1, d);
      u.w2 = add(p + ".mlp.w2", d, ud);
      u.b2 = add(p + ".mlp.b2", 1, ud);
      u.wa = add(p + ".pool.w", ud, ud);
      u.ba = add(p + ".pool.b", 1, ud);
      u.va = add(p + ".pool.v", 1, ud);
      unique_.push_back(u);
    }
    head_shared_.w1 = add("head.shared.w1", cfg_.d_s, cfg_.d_p);
    head_shared_.b1 = add("head.shared.b1", 1, cfg_.d_p);
    head_shared_.w2 = add("head.shared.w2", cfg_.d_p, cfg_.d_p);
    head_shared_.b2 = add("head.shared.b2", 1, cfg_.d_p);
    for (int i = 0; i < cfg_.n_modalities; ++i) {
      std::string p = "head.unique." + std::to_string(i);
      Head h;
      h.w1 = add(p + ".w1", ud, cfg_.d_p);
      h.b1 = add(p + ".b1", 1, cfg_.d_p);
      h.w2 = add(p + ".w2", cfg_.d_p, cfg_.d_p);
      h.b2 = add(p + ".b2", 1, cfg_.d_p);
      head_unique_.push_back(h);
    }
  }

  static bool is_embedding(const std::string& name) {
    return name == "fusion.cls" || name == "fusion.pos" || name == "fusion.mask_token" ||
           name.rfind("fusion.type.", 0) == 0;
  }

  void init_params(Rng& rng) {
    for (Param* p : params_) {
      const std::string& n = p->name;
      if (n.size() >= 2 && (n.compare(n.size() - 2, 2, ".g") == 0)) {
        p->value.setOnes();  // layer-norm gains
      } else if (is_embedding(n)) {
        for (Eigen::Index i = 0; i < p->value.size(); ++i)
          p->value.data()[i] = static_cast<S>(rng.normal(0.0, 0.02));
      } else if (p->value.rows() == 1) {
        p->value.setZero();  // biases, LN shifts, pooling score vectors
      } else {
        // truncated normal, fan-in scaled so activations keep unit order
        // through the GELU stacks
        double sigma = std::sqrt(2.0 / static_cast<double>(p->value.rows()));
        for (Eigen::Index i = 0; i < p->value.size(); ++i) {
          double v = rng.normal(0.0, sigma);
          while (std::abs(v) > 2.0 * sigma) v = rng.normal(0.0, sigma);
          p->value.data()[i] = static_cast<S>(v);
        }
      }
    }
  }

  ModelConfig cfg_;
  std::vector<std::unique_ptr<Param>> owned_;
  std::vector<Param*> params_;
  std::map<std::string, Param*> by_name_;

  std::vector<Enc> enc_shared_, enc_unique_;
  Param* cls_ = nullptr;
  Param* pos_ = nullptr;
  Param* mask_token_ = nullptr;
  std::vector<Param*> type_emb_;
  std::vector<Block> blocks_;
  Param *ln_out_g_ = nullptr, *ln_out_b_ = nullptr;
  std::vector<UniquePath> unique_;
  Head head_shared_;
  std::vector<Head> head_unique_;
};

}  // namespace coral
