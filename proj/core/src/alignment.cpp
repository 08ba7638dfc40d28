#include "simr/alignment.hpp"

#include <cmath>
#include <string>

namespace simr {

KvChoice parse_kv_choice(std::string_view name) {
  if (name == "global") return KvChoice::Global;
  if (name == "local") return KvChoice::Local;
  if (name == "both") return KvChoice::Both;
  throw ConfigError("unknown kv choice '" + std::string(name) + "' (expected global, local or both)");
}

std::string_view kv_choice_name(KvChoice kv) {
  switch (kv) {
    case KvChoice::Global: return "global";
    case KvChoice::Local: return "local";
    case KvChoice::Both: return "both";
  }
  return "?";
}

HeadKind parse_head_kind(std::string_view name) {
  if (name == "linear") return HeadKind::Linear;
  if (name == "mlp") return HeadKind::Mlp;
  if (name == "cos_proj_proj") return HeadKind::CosProjProj;
  if (name == "cos_proj_orig") return HeadKind::CosProjOrig;
  throw ConfigError("unknown head kind '" + std::string(name) +
                    "' (expected linear, mlp, cos_proj_proj or cos_proj_orig)");
}

std::string_view head_kind_name(HeadKind head) {
  switch (head) {
    case HeadKind::Linear: return "linear";
    case HeadKind::Mlp: return "mlp";
    case HeadKind::CosProjProj: return "cos_proj_proj";
    case HeadKind::CosProjOrig: return "cos_proj_orig";
  }
  return "?";
}

bool is_cosine(HeadKind head) { return head == HeadKind::CosProjProj || head == HeadKind::CosProjOrig; }

void AlignmentConfig::validate() const {
  if (embed_dim == 0 || heads == 0 || ffn_dim == 0) throw ConfigError("alignment: dimensions must be positive");
  if (embed_dim % heads != 0) {
    throw ConfigError("alignment: embed_dim " + std::to_string(embed_dim) + " not divisible by heads " +
                      std::to_string(heads));
  }
  if (head == HeadKind::Mlp && mlp_hidden == 0) throw ConfigError("alignment: mlp_hidden must be positive");
}

namespace {

template <typename T>
KeyValueSet<T> select_kv(Var<T> local, Var<T> global, const std::vector<std::uint8_t>* local_valid, KvChoice kv) {
  const auto n = local.dim(0), l = local.dim(1), d = local.dim(2);
  KeyValueSet<T> out;
  auto global_token = reshape(global, {n, 1, d});
  switch (kv) {
    case KvChoice::Global:
      out.tokens = global_token;
      out.valid.assign(n, 1);
      out.local_count = 0;
      return out;
    case KvChoice::Local:
      out.tokens = local;
      out.local_count = l;
      if (local_valid) {
        out.valid = *local_valid;
      } else {
        out.valid.assign(n * l, 1);
      }
      return out;
    case KvChoice::Both:
      out.tokens = concat<T>({local, global_token}, 1);
      out.local_count = l;
      out.valid.reserve(n * (l + 1));
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < l; ++j) out.valid.push_back(local_valid ? (*local_valid)[i * l + j] : 1);
        out.valid.push_back(1);
      }
      return out;
  }
  throw ConfigError("select_kv: invalid kv choice");
}

}  // namespace

template <typename T>
KeyValueSet<T> select_image_kv(const FeatureBundle<T>& f, KvChoice kv) {
  return select_kv<T>(f.x_local, f.x_global, nullptr, kv);
}

template <typename T>
KeyValueSet<T> select_text_kv(const FeatureBundle<T>& f, KvChoice kv) {
  return select_kv<T>(f.y_local, f.y_global, &f.text_valid, kv);
}

template <typename T>
Alignment<T>::Alignment(ParamStore<T>& store, const AlignmentConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
  cfg_.validate();
  const auto d = cfg.embed_dim;
  query_ = LinearParams<T>::make(store, "align.query", d, d, false, rng);
  key_ = LinearParams<T>::make(store, "align.key", d, d, false, rng);
  value_ = LinearParams<T>::make(store, "align.value", d, d, false, rng);
  out_ = LinearParams<T>::make(store, "align.out", d, d, true, rng);
  norm_ = LayerNormParams<T>::make(store, "align.norm", d);
  ffn_ = FeedForwardParams<T>::make(store, "align.ffn", d, cfg.ffn_dim, d, rng);
  if (cfg.head == HeadKind::Linear) {
    head_linear_ = LinearParams<T>::make(store, "align.head", d, 1, true, rng);
  } else if (cfg.head == HeadKind::Mlp) {
    head_hidden_ = LinearParams<T>::make(store, "align.head.hidden", d, cfg.mlp_hidden, true, rng);
    head_output_ = LinearParams<T>::make(store, "align.head.output", cfg.mlp_hidden, 1, true, rng);
  }
}

template <typename T>
CrossAttentionResult<T> Alignment<T>::cross_attend(ParamBinder<T>& bind, Var<T> queries,
                                                   const KeyValueSet<T>& kv) const {
  const auto nq = queries.dim(0), d = queries.dim(1);
  const auto nk = kv.tokens.dim(0), klen = kv.tokens.dim(1);
  if (kv.tokens.dim(2) != d || d != cfg_.embed_dim) {
    throw DimensionError("cross_attend: feature width mismatch between queries " + shape_str(queries.shape()) +
                         " and keys " + shape_str(kv.tokens.shape()));
  }
  const auto h = cfg_.heads, dh = d / h;

  auto q = query_(bind, queries);                                                    // (Nq, D)
  auto qh = permute(reshape(q, {nq, h, dh}), {1, 0, 2});                            // (H, Nq, dh)
  auto kh = reshape(permute(reshape(key_(bind, kv.tokens), {nk, klen, h, dh}), {2, 3, 0, 1}),
                    {h, dh, nk * klen});                                             // (H, dh, Nk*K)
  auto vh = permute(reshape(value_(bind, kv.tokens), {nk, klen, h, dh}), {2, 0, 1, 3});  // (H, Nk, K, dh)

  auto logits = reshape(scale(matmul(qh, kh), T(1) / std::sqrt(static_cast<T>(dh))), {h, nq, nk, klen});
  const bool all_valid = std::all_of(kv.valid.begin(), kv.valid.end(), [](auto v) { return v != 0; });
  Var<T> attn;
  if (all_valid) {
    attn = softmax(logits, 3);
  } else {
    std::vector<std::uint8_t> keep(h * nq * nk * klen);
    for (std::size_t hh = 0; hh < h; ++hh) {
      for (std::size_t a = 0; a < nq; ++a) {
        std::copy(kv.valid.begin(), kv.valid.end(), keep.begin() + static_cast<std::ptrdiff_t>((hh * nq + a) * nk * klen));
      }
    }
    attn = masked_softmax(logits, std::move(keep), 3);
  }

  // (H, Nk, Nq, K) x (H, Nk, K, dh) -> (H, Nk, Nq, dh) -> (Nq, Nk, D)
  auto ctx = matmul(permute(attn, {0, 2, 1, 3}), vh);
  ctx = reshape(permute(ctx, {2, 1, 0, 3}), {nq, nk, d});

  Var<T> hidden;
  Var<T> sr;
  if (cfg_.residual) {
    hidden = norm_(bind, add(out_(bind, ctx), reshape(q, {nq, 1, d})));
    sr = add(hidden, ffn_(bind, hidden));
  } else {
    hidden = norm_(bind, out_(bind, ctx));
    sr = ffn_(bind, hidden);
  }

  CrossAttentionResult<T> result;
  result.sr = sr;
  // Attention weights in (Nq, Nk, H, K) order, detached from the graph.
  const auto& w = attn.value().data;
  result.attention = Tensor<T>(Shape{nq, nk, h, klen});
  for (std::size_t hh = 0; hh < h; ++hh) {
    for (std::size_t a = 0; a < nq; ++a) {
      for (std::size_t b = 0; b < nk; ++b) {
        const T* src = w.data() + ((hh * nq + a) * nk + b) * klen;
        std::copy_n(src, klen, result.attention.data.data() + ((a * nk + b) * h + hh) * klen);
      }
    }
  }
  return result;
}

template <typename T>
CrossAttentionResult<T> Alignment<T>::cross_attend_t2i(ParamBinder<T>& bind, const FeatureBundle<T>& f) const {
  return cross_attend(bind, f.y_global, select_image_kv(f, cfg_.kv));
}

template <typename T>
CrossAttentionResult<T> Alignment<T>::cross_attend_i2t(ParamBinder<T>& bind, const FeatureBundle<T>& f) const {
  return cross_attend(bind, f.x_global, select_text_kv(f, cfg_.kv));
}

template <typename T>
Var<T> Alignment<T>::project_similarity(ParamBinder<T>& bind, Var<T> sr) const {
  if (sr.shape().size() != 3) throw DimensionError("project_similarity: SR must be 3-D, got " + shape_str(sr.shape()));
  const auto a = sr.dim(0), b = sr.dim(1);
  switch (cfg_.head) {
    case HeadKind::Linear:
      return reshape(head_linear_(bind, sr), {a, b});
    case HeadKind::Mlp:
      return reshape(head_output_(bind, gelu(head_hidden_(bind, sr))), {a, b});
    default:
      throw ConfigError("project_similarity: head kind '" + std::string(head_kind_name(cfg_.head)) +
                        "' has no learned projection");
  }
}

template <typename T>
SimilarityOutput<T> Alignment<T>::similarity(ParamBinder<T>& bind, const FeatureBundle<T>& f) const {
  if (!cfg_.cross_attention) {
    SimilarityOutput<T> out;
    out.s_t2i = matmul(f.y_global, transpose(f.x_global));
    out.s_i2t = transpose(out.s_t2i);
    return out;
  }
  auto t2i = cross_attend_t2i(bind, f);
  auto i2t = cross_attend_i2t(bind, f);
  SimilarityOutput<T> out;
  out.sr_t2i = t2i.sr;
  out.sr_i2t = i2t.sr;
  out.attn_t2i = std::move(t2i.attention);
  out.attn_i2t = std::move(i2t.attention);
  out.image_local_keys = cfg_.kv == KvChoice::Global ? 0 : f.x_local.dim(1);
  if (is_cosine(cfg_.head)) {
    std::tie(out.s_t2i, out.s_i2t) = cosine_variant_scores(f, out.sr_t2i, out.sr_i2t, cfg_.head);
  } else {
    out.s_t2i = project_similarity(bind, out.sr_t2i);
    out.s_i2t = project_similarity(bind, out.sr_i2t);
  }
  return out;
}

template <typename T>
std::pair<Var<T>, Var<T>> cosine_variant_scores(const FeatureBundle<T>& f, Var<T> sr_t2i, Var<T> sr_i2t,
                                                HeadKind variant) {
  const auto nt = sr_t2i.dim(0), ni = sr_t2i.dim(1), d = sr_t2i.dim(2);
  if (sr_i2t.shape() != Shape{ni, nt, d}) {
    throw DimensionError("cosine_variant_scores: SR shapes " + shape_str(sr_t2i.shape()) + " and " +
                         shape_str(sr_i2t.shape()) + " are not mirrored");
  }
  auto i2t_as_t2i = l2_normalize(permute(sr_i2t, {1, 0, 2}), 2);  // (T, I, D)
  auto t2i_unit = l2_normalize(sr_t2i, 2);
  Var<T> s;
  switch (variant) {
    case HeadKind::CosProjProj:
      s = sum(mul(i2t_as_t2i, t2i_unit), 2);
      break;
    case HeadKind::CosProjOrig: {
      auto text = reshape(l2_normalize(f.y_global, 1), {nt, 1, d});
      auto image = reshape(l2_normalize(f.x_global, 1), {1, ni, d});
      s = add(sum(mul(i2t_as_t2i, text), 2), sum(mul(t2i_unit, image), 2));
      break;
    }
    default:
      throw ConfigError("cosine_variant_scores: '" + std::string(head_kind_name(variant)) +
                        "' is not a cosine variant");
  }
  return {s, transpose(s)};
}

template KeyValueSet<float> select_image_kv(const FeatureBundle<float>&, KvChoice);
template KeyValueSet<double> select_image_kv(const FeatureBundle<double>&, KvChoice);
template KeyValueSet<float> select_text_kv(const FeatureBundle<float>&, KvChoice);
template KeyValueSet<double> select_text_kv(const FeatureBundle<double>&, KvChoice);
template class Alignment<float>;
template class Alignment<double>;
template std::pair<Var<float>, Var<float>> cosine_variant_scores(const FeatureBundle<float>&, Var<float>, Var<float>,
                                                                 HeadKind);
template std::pair<Var<double>, Var<double>> cosine_variant_scores(const FeatureBundle<double>&, Var<double>,
                                                                   Var<double>, HeadKind);

}  // namespace simr
