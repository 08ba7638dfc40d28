#pragma once

// Cross-attention alignment. A single parameter set serves both directions:
//
//   t2i: text global features query the image tokens  -> SR_t2i (T, I, D)
//   i2t: image global features query the text tokens  -> SR_i2t (I, T, D)
//
// Each SR entry is the output of a transformer-style block
//   h  = LN(q + W_O * MultiHead(q, K, V))
//   SR = h + FFN(h)
// evaluated for every (query item, key item) pair. A head then maps SR to a
// scalar similarity, or one of the two cosine schemes scores SR directly.

#include <string_view>
#include <vector>

#include "simr/encoders.hpp"

namespace simr {

enum class KvChoice { Global, Local, Both };
enum class HeadKind { Linear, Mlp, CosProjProj, CosProjOrig };

KvChoice parse_kv_choice(std::string_view name);
std::string_view kv_choice_name(KvChoice kv);
HeadKind parse_head_kind(std::string_view name);
std::string_view head_kind_name(HeadKind head);
bool is_cosine(HeadKind head);

struct AlignmentConfig {
  std::size_t embed_dim = 32;
  std::size_t heads = 4;
  std::size_t ffn_dim = 64;
  std::size_t mlp_hidden = 16;  // MLP head width, D/2 by default
  HeadKind head = HeadKind::Linear;
  KvChoice kv = KvChoice::Both;
  bool residual = true;
  /// Off: S_t2i = y_global x_global^T with no cross-attention, SR or
  /// attention maps. Head and kv settings are then ignored.
  bool cross_attention = true;

  void validate() const;
};

/// Key/value token set for one side of the attention, plus validity mask.
template <typename T>
struct KeyValueSet {
  Var<T> tokens;                    // (N, K, D)
  std::vector<std::uint8_t> valid;  // (N, K)
  std::size_t local_count = 0;      // leading positions that are local tokens
};

/// Image-side keys/values for t2i. global: x_global as one token; local:
/// the L patch tokens; both: the L patch tokens followed by x_global.
template <typename T>
KeyValueSet<T> select_image_kv(const FeatureBundle<T>& f, KvChoice kv);
/// Text-side keys/values for i2t, same layout; padded tokens are invalid.
template <typename T>
KeyValueSet<T> select_text_kv(const FeatureBundle<T>& f, KvChoice kv);

template <typename T>
struct CrossAttentionResult {
  Var<T> sr;             // (Nq, Nk, D)
  Tensor<T> attention;   // (Nq, Nk, heads, K)
};

template <typename T>
struct SimilarityOutput {
  Var<T> sr_t2i;  // (T, I, D)
  Var<T> sr_i2t;  // (I, T, D)
  Var<T> s_t2i;   // (T, I)
  Var<T> s_i2t;   // (I, T)
  Tensor<T> attn_t2i;  // (T, I, heads, K)
  Tensor<T> attn_i2t;  // (I, T, heads, K)
  std::size_t image_local_keys = 0;  // grounding-capable prefix of attn_t2i's key axis
};

template <typename T>
class Alignment {
 public:
  Alignment(ParamStore<T>& store, const AlignmentConfig& cfg, std::mt19937_64& rng);

  const AlignmentConfig& config() const noexcept { return cfg_; }

  /// Generic pairwise cross-attention: every query row attends to every key
  /// item's token set.
  CrossAttentionResult<T> cross_attend(ParamBinder<T>& bind, Var<T> queries, const KeyValueSet<T>& kv) const;

  CrossAttentionResult<T> cross_attend_t2i(ParamBinder<T>& bind, const FeatureBundle<T>& f) const;
  CrossAttentionResult<T> cross_attend_i2t(ParamBinder<T>& bind, const FeatureBundle<T>& f) const;

  /// Learned head over the last axis of SR: (A, B, D) -> (A, B). Only valid
  /// for the linear and MLP head kinds.
  Var<T> project_similarity(ParamBinder<T>& bind, Var<T> sr) const;

  /// Both directions plus the configured similarity head.
  SimilarityOutput<T> similarity(ParamBinder<T>& bind, const FeatureBundle<T>& f) const;

 private:
  AlignmentConfig cfg_;
  LinearParams<T> query_, key_, value_, out_;
  LayerNormParams<T> norm_;
  FeedForwardParams<T> ffn_;
  LinearParams<T> head_linear_;
  LinearParams<T> head_hidden_, head_output_;
};

/// Cosine scores over SR (two schemes). Returns (S_t2i, S_i2t) with
/// S_i2t = S_t2i^T. Zero-norm vectors score 0 and are counted by the graph.
///   CosProjProj: S[t][i] = cos(SR_i2t[i][t], SR_t2i[t][i])
///   CosProjOrig: S[t][i] = cos(SR_i2t[i][t], y_global[t]) + cos(SR_t2i[t][i], x_global[i])
template <typename T>
std::pair<Var<T>, Var<T>> cosine_variant_scores(const FeatureBundle<T>& f, Var<T> sr_t2i, Var<T> sr_i2t,
                                                HeadKind variant);

}  // namespace simr
