#include "hmr/context_transformer.hpp"

namespace hmr::transformer {

void TransformerConfig::validate() const {
  if (image_size % patch != 0)
    throw ConfigError("model: image size must be a multiple of the patch size");
  if (c_model % heads != 0) throw ConfigError("model: heads must divide width");
  if (c_model % 4 != 0) throw ConfigError("model: width must be divisible by 4");
  if (num_levels != 2) throw ConfigError("model: expected 1x and 4x levels");
  if (points < 1 || synth_layers < 1 || gapr_blocks < 1 || enc_blocks < 1)
    throw ConfigError("model: bad depth configuration");
  if (codebook_size < 2 || num_tokens < 1)
    throw ConfigError("model: bad token configuration");
}

nlohmann::json TransformerConfig::to_json() const {
  nlohmann::json j;
  j["c_model"] = c_model;
  j["heads"] = heads;
  j["enc_blocks"] = enc_blocks;
  j["synth_layers"] = synth_layers;
  j["gapr_blocks"] = gapr_blocks;
  j["mlp_ratio"] = mlp_ratio;
  j["patch"] = patch;
  j["image_size"] = image_size;
  j["points"] = points;
  j["num_levels"] = num_levels;
  j["num_tokens"] = num_tokens;
  j["codebook_size"] = codebook_size;
  j["num_keypoints"] = num_keypoints;
  j["num_labels"] = num_labels;
  j["z_min"] = z_min;
  j["focal_px"] = focal_px;
  return j;
}

TransformerConfig TransformerConfig::from_json(const nlohmann::json& j) {
  TransformerConfig c;
  c.c_model = j.at("c_model").get<int>();
  c.heads = j.at("heads").get<int>();
  c.enc_blocks = j.at("enc_blocks").get<int>();
  c.synth_layers = j.at("synth_layers").get<int>();
  c.gapr_blocks = j.at("gapr_blocks").get<int>();
  c.mlp_ratio = j.at("mlp_ratio").get<int>();
  c.patch = j.at("patch").get<int>();
  c.image_size = j.at("image_size").get<int>();
  c.points = j.at("points").get<int>();
  c.num_levels = j.at("num_levels").get<int>();
  c.num_tokens = j.at("num_tokens").get<int>();
  c.codebook_size = j.at("codebook_size").get<int>();
  c.num_keypoints = j.at("num_keypoints").get<int>();
  c.num_labels = j.at("num_labels").get<int>();
  c.z_min = j.at("z_min").get<double>();
  c.focal_px = j.at("focal_px").get<double>();
  return c;
}

std::uint64_t TransformerConfig::hash() const {
  const std::string s = to_json().dump();
  return fnv1a64(s.data(), s.size());
}

TransformerConfig TransformerConfig::from_config(const ConfigMap& cfg,
                                                 const std::string& p) {
  TransformerConfig c;
  c.c_model = cfg.get_int(p + "c_model", c.c_model);
  c.heads = cfg.get_int(p + "heads", c.heads);
  c.enc_blocks = cfg.get_int(p + "enc_blocks", c.enc_blocks);
  c.synth_layers = cfg.get_int(p + "synth_layers", c.synth_layers);
  c.gapr_blocks = cfg.get_int(p + "gapr_blocks", c.gapr_blocks);
  c.mlp_ratio = cfg.get_int(p + "mlp_ratio", c.mlp_ratio);
  c.patch = cfg.get_int(p + "patch", c.patch);
  c.image_size = cfg.get_int(p + "image_size", c.image_size);
  c.points = cfg.get_int(p + "points", c.points);
  c.num_tokens = cfg.get_int(p + "num_tokens", c.num_tokens);
  c.codebook_size = cfg.get_int(p + "codebook_size", c.codebook_size);
  c.num_labels = cfg.get_int(p + "num_labels", c.num_labels);
  c.z_min = cfg.get_double(p + "z_min", c.z_min);
  c.focal_px = cfg.get_double(p + "focal_px", c.focal_px);
  c.validate();
  return c;
}

Tensor<double> normalized_hand_adjacency() {
  const int n = hand::kNumRegressed;
  Tensor<double> a({n, n});
  for (int i = 0; i < n; ++i) a[i * n + i] = 1.0;
  for (const auto& [u, v] : hand::skeleton_edges21()) {
    a[u * n + v] = 1.0;
    a[v * n + u] = 1.0;
  }
  Tensor<double> deg({n});
  for (int i = 0; i < n; ++i) {
    double d = 0.0;
    for (int j = 0; j < n; ++j) d += a[i * n + j];
    deg[i] = 1.0 / std::sqrt(d);
  }
  Tensor<double> out({n, n});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) out[i * n + j] = deg[i] * a[i * n + j] * deg[j];
  return out;
}

template <typename T>
ContextTransformer<T>::ContextTransformer(const TransformerConfig& config,
                                          std::uint64_t seed)
    : cfg(config) {
  cfg.validate();
  Rng rng(seed ^ 0x7472616e73ull);
  const int c = cfg.c_model;
  const int g2 = cfg.grid() * cfg.grid();
  const int kq = cfg.num_queries();

  patch_proj_ = nn::Linear<T>(params, "enc.patch", cfg.patch * cfg.patch * 3, c, rng);
  pos_emb_ = params.add("enc.pos", nn::randn_init<T>(rng, {g2, c}, 0.02));
  for (int i = 0; i < cfg.enc_blocks; ++i)
    enc_blocks_.emplace_back(params, "enc.blk" + std::to_string(i), c, cfg.heads,
                             cfg.mlp_ratio, rng);
  enc_ln_ = nn::LayerNorm<T>(params, "enc.ln", c);
  scale1_proj_ = nn::Linear<T>(params, "enc.scale1", c, c, rng);
  up1_ = nn::Linear<T>(params, "enc.up1", c, 4 * (c / 2), rng);
  up2_ = nn::Linear<T>(params, "enc.up2", c / 2, 4 * (c / 4), rng);
  up3_ = nn::Linear<T>(params, "enc.up3", c / 4, c, rng);

  if (cfg.num_labels > 0) {
    label_table_ =
        params.add("label.table", nn::randn_init<T>(rng, {cfg.num_labels, c}, 0.5));
    label_proj1_ = nn::Linear<T>(params, "label.proj1", c, c, rng);
    label_proj4_ = nn::Linear<T>(params, "label.proj4", c, c, rng);
  }

  adjacency_ = normalized_hand_adjacency().cast<T>();
  gcn1_ = nn::Linear<T>(params, "gcn.l1", 3, c, rng);
  gcn2_ = nn::Linear<T>(params, "gcn.l2", c, c, rng);

  token_table_ = params.add(
      "tok.table", nn::randn_init<T>(rng, {cfg.codebook_size + 1, c}, 0.02));
  token_pos_ =
      params.add("tok.pos", nn::randn_init<T>(rng, {cfg.num_tokens, c}, 0.02));
  ctx_pos_ = params.add("tok.ctx_pos",
                        nn::randn_init<T>(rng, {cfg.num_keypoints, c}, 0.02));

  for (int i = 0; i < cfg.gapr_blocks; ++i) {
    gapr_blocks_.emplace_back(params, "gapr.blk" + std::to_string(i), c,
                              cfg.heads, cfg.mlp_ratio, rng);
    gapr_adjacency_.push_back(
        params.add("gapr.adj" + std::to_string(i), Tensor<T>({kq, kq})));
  }
  eq1_ln_ = nn::LayerNorm<T>(params, "gapr.eq1_ln", c);
  eq1_attn_ = nn::SelfAttention<T>(params, "gapr.eq1_attn", c, cfg.heads, rng);
  eq1_conv_ = nn::Linear<T>(params, "gapr.eq1_conv", c, c, rng);
  eq2_ln_ = nn::LayerNorm<T>(params, "gapr.eq2_ln", c);
  se_fc1_ = nn::Linear<T>(params, "gapr.se_fc1", c, c / 4, rng);
  se_fc2_ = nn::Linear<T>(params, "gapr.se_fc2", c / 4, c, rng);
  align_ = nn::Linear<T>(params, "gapr.align", c, c, rng);

  const int lhp = cfg.num_levels * cfg.heads * cfg.points;
  for (int i = 0; i < cfg.synth_layers; ++i) {
    const std::string p = "synth.l" + std::to_string(i);
    DeformLayer layer;
    layer.ln_q = nn::LayerNorm<T>(params, p + ".ln_q", c);
    layer.offset_lin = nn::Linear<T>(params, p + ".offset", c, lhp * 2, rng, 0.05);
    layer.weight_lin = nn::Linear<T>(params, p + ".weight", c, lhp, rng);
    layer.value_lin = nn::Linear<T>(params, p + ".value", c, c, rng);
    layer.out_lin = nn::Linear<T>(params, p + ".out", c, c, rng);
    layer.ln_s = nn::LayerNorm<T>(params, p + ".ln_s", c);
    layer.self_attn = nn::SelfAttention<T>(params, p + ".attn", c, cfg.heads, rng);
    layer.ln_m = nn::LayerNorm<T>(params, p + ".ln_m", c);
    layer.mlp = nn::Mlp<T>(params, p + ".mlp", c, c * cfg.mlp_ratio, rng);
    layers_.push_back(std::move(layer));
  }
  ref_points_raw_ = params.add("synth.ref", Tensor<T>({kq, 2}));
  final_ln_ = nn::LayerNorm<T>(params, "synth.final_ln", c);
  logit_head_ = nn::Linear<T>(params, "synth.logits", c, cfg.codebook_size, rng);

  xattn_queries_ = params.add("head.queries", nn::randn_init<T>(rng, {2, c}, 0.5));
  xattn_ln_ = nn::LayerNorm<T>(params, "head.ln", c);
  xattn_q_ = nn::Linear<T>(params, "head.q", c, c, rng);
  xattn_kv_ = nn::Linear<T>(params, "head.kv", c, 2 * c, rng);
  xattn_out_ = nn::Linear<T>(params, "head.out", c, c, rng);
  beta_head_ = nn::Linear<T>(params, "head.beta", c, hand::kBetaDim, rng, 0.1);
  cam_head_ = nn::Linear<T>(params, "head.cam", c, 3, rng, 0.1);
}

template <typename T>
Var<T> ContextTransformer<T>::patch_embed(const Tensor<T>& images) const {
  const int s = cfg.image_size, p = cfg.patch, g = cfg.grid();
  if (images.rank() != 4 || images.dim(1) != s || images.dim(2) != s ||
      images.dim(3) != 3)
    throw InputError("encode_image: expected (B, " + std::to_string(s) + ", " +
                     std::to_string(s) + ", 3) input");
  const int bsz = images.dim(0);
  Tensor<T> patches({bsz * g * g, p * p * 3});
  for (int b = 0; b < bsz; ++b)
    for (int gy = 0; gy < g; ++gy)
      for (int gx = 0; gx < g; ++gx) {
        T* dst = patches.data() +
                 ((static_cast<std::int64_t>(b) * g + gy) * g + gx) * p * p * 3;
        for (int y = 0; y < p; ++y) {
          const T* src =
              images.data() +
              ((static_cast<std::int64_t>(b) * s + gy * p + y) * s + gx * p) * 3;
          std::copy(src, src + p * 3, dst + static_cast<std::int64_t>(y) * p * 3);
        }
      }
  Var<T> x = patch_proj_(Var<T>::constant(std::move(patches)));
  return ad::add_tiled(x, pos_emb_);
}

template <typename T>
ImageContext<T> ContextTransformer<T>::encode_image(const Tensor<T>& images) const {
  const int bsz = images.dim(0);
  const int g = cfg.grid(), c = cfg.c_model;
  Var<T> x = ad::reshape(patch_embed(images), {bsz, g * g, c});
  for (const auto& blk : enc_blocks_) x = blk(x);
  x = enc_ln_(x);
  ImageContext<T> ctx;
  ctx.map1 = ad::reshape(scale1_proj_(x), {bsz, g, g, c});
  Var<T> h = ad::reshape(up1_(x), {bsz, g, g, 4 * (c / 2)});
  h = ad::gelu(ad::depth_to_space2(h));  // (B, 2g, 2g, c/2)
  h = ad::reshape(up2_(ad::reshape(h, {bsz * 2 * g * 2 * g, c / 2})),
                  {bsz, 2 * g, 2 * g, 4 * (c / 4)});
  h = ad::gelu(ad::depth_to_space2(h));  // (B, 4g, 4g, c/4)
  Var<T> m4 = up3_(ad::reshape(h, {bsz * 4 * g * 4 * g, c / 4}));
  ctx.map4 = ad::reshape(m4, {bsz, 4 * g, 4 * g, c});
  if (!ctx.map1.value().all_finite() || !ctx.map4.value().all_finite())
    throw NumericError("encode_image: non-finite feature maps");
  return ctx;
}

template <typename T>
ImageContext<T> ContextTransformer<T>::zero_context(int batch) const {
  const int g = cfg.grid(), c = cfg.c_model;
  ImageContext<T> ctx;
  ctx.map1 = Var<T>::constant(Tensor<T>({batch, g, g, c}));
  ctx.map4 = Var<T>::constant(Tensor<T>({batch, 4 * g, 4 * g, c}));
  return ctx;
}

template <typename T>
ImageContext<T> ContextTransformer<T>::label_context(
    const std::vector<int>& labels) const {
  if (cfg.num_labels <= 0)
    throw ConfigError("label_context: model built without label conditioning");
  for (const int l : labels)
    if (l < 0 || l >= cfg.num_labels)
      throw InputError("label_context: unknown label " + std::to_string(l));
  const int bsz = static_cast<int>(labels.size());
  const int g = cfg.grid(), c = cfg.c_model;
  Var<T> emb = ad::embedding(label_table_, labels);  // (B, C)
  ImageContext<T> ctx;
  ctx.map1 = ad::reshape(
      ad::tile_rows_blocked(label_proj1_(emb), static_cast<std::int64_t>(g) * g),
      {bsz, g, g, c});
  ctx.map4 = ad::reshape(ad::tile_rows_blocked(label_proj4_(emb),
                                               static_cast<std::int64_t>(4 * g) *
                                                   (4 * g)),
                         {bsz, 4 * g, 4 * g, c});
  return ctx;
}

template <typename T>
Var<T> ContextTransformer<T>::embed_2d_pose(const Tensor<T>& keypoints) const {
  return embed_2d_pose_with(adjacency_, keypoints);
}

template <typename T>
Var<T> ContextTransformer<T>::embed_2d_pose_with(const Tensor<T>& adjacency,
                                                 const Tensor<T>& keypoints) const {
  if (keypoints.rank() != 3 || keypoints.dim(1) != cfg.num_keypoints ||
      keypoints.dim(2) != 3)
    throw InputError("embed_2d_pose: expected (B, 21, 3) keypoints");
  const int bsz = keypoints.dim(0);
  Tensor<T> x = keypoints;
  const T inv = T(1) / static_cast<T>(cfg.image_size);
  for (std::int64_t i = 0; i < x.rows(); ++i) {
    x[i * 3 + 0] *= inv;
    x[i * 3 + 1] *= inv;
  }
  Var<T> h = Var<T>::constant(std::move(x));
  h = ad::left_matmul_batched(adjacency, h);
  h = ad::relu(ad::reshape(gcn1_(h), {bsz, cfg.num_keypoints, cfg.c_model}));
  h = ad::left_matmul_batched(adjacency, h);
  return ad::reshape(gcn2_(h), {bsz, cfg.num_keypoints, cfg.c_model});
}

template <typename T>
Var<T> ContextTransformer<T>::gapr_graph_blocks(const Var<T>& q) const {
  Var<T> x = q;
  for (std::size_t i = 0; i < gapr_blocks_.size(); ++i)
    x = gapr_blocks_[i](x, gapr_adjacency_[i]);
  return x;
}

template <typename T>
Var<T> ContextTransformer<T>::gapr_refine_residual(const Var<T>& q) const {
  const auto shape = q.value().shape();
  Var<T> n = eq1_ln_(q);
  Var<T> mha = ad::reshape(eq1_attn_(ad::reshape(n, shape)), shape);
  Var<T> conv = ad::reshape(eq1_conv_(n), shape);
  return ad::add(ad::add(mha, conv), q);
}

template <typename T>
Var<T> ContextTransformer<T>::gapr_se_gate(const Var<T>& q,
                                           bool force_gate_one) const {
  const int kq = q.value().dim(1);
  Var<T> n = eq2_ln_(q);
  if (force_gate_one) return n;
  Var<T> pooled = ad::mean_rows_blocked(ad::reshape(n, {q.value().dim(0) * kq,
                                                        q.value().dim(2)}),
                                        kq);
  Var<T> gate = ad::sigmoid(se_fc2_(ad::relu(se_fc1_(pooled))));
  Var<T> out = ad::mul_rows_blocked(
      ad::reshape(n, {q.value().dim(0) * kq, q.value().dim(2)}), gate, kq);
  return ad::reshape(out, q.value().shape());
}

template <typename T>
Var<T> ContextTransformer<T>::gapr_forward(const Var<T>& q) const {
  return gapr_se_gate(gapr_refine_residual(gapr_graph_blocks(q)));
}

template <typename T>
Var<T> ContextTransformer<T>::deformable_read(int layer, const Var<T>& q_norm,
                                              const ImageContext<T>& ctx) const {
  const DeformLayer& dl = layers_[static_cast<std::size_t>(layer)];
  const int bsz = q_norm.value().dim(0);
  const int kq = q_norm.value().dim(1);
  const int c = cfg.c_model;
  const int hh = cfg.heads, pp = cfg.points, lv = cfg.num_levels;
  const int dh = c / hh;

  Var<T> flat = ad::reshape(q_norm, {bsz * kq, c});
  Var<T> offsets = dl.offset_lin(flat);                    // (B*Kq, L*H*P*2)
  Var<T> weights = dl.weight_lin(flat);                    // (B*Kq, H*L*P)
  Var<T> attn = ad::softmax_rows(
      ad::reshape(weights, {bsz * kq * hh, lv * pp}));     // sums to 1 per head
  Var<T> ref = ad::sigmoid(ref_points_raw_);               // (Kq, 2)

  const Var<T>* maps[2] = {&ctx.map1, &ctx.map4};
  std::vector<Var<T>> head_values;
  for (int l = 0; l < lv; ++l) {
    Var<T> off_l = ad::slice_cols(offsets, static_cast<std::int64_t>(l) * hh * pp * 2,
                                  hh * pp * 2);
    Var<T> locs = ad::add_repeat_rows(
        ad::reshape(off_l, {bsz * kq * hh * pp, 2}), ref,
        static_cast<std::int64_t>(hh) * pp);
    // Bilinear sampling commutes with the value projection, so project on
    // whichever side has fewer rows: the whole map for the coarse level,
    // the sampled points for the fine one.
    const auto& ms = maps[l]->value().shape();
    const std::int64_t map_rows =
        static_cast<std::int64_t>(ms[0]) * ms[1] * ms[2];
    const std::int64_t point_rows = static_cast<std::int64_t>(bsz) * kq * hh * pp;
    Var<T> values;
    if (map_rows <= point_rows) {
      Var<T> vmap = ad::reshape(
          dl.value_lin(ad::reshape(*maps[l], {ms[0], ms[1] * ms[2], c})),
          {ms[0], ms[1], ms[2], c});
      values = ad::grid_sample(vmap, ad::reshape(locs, {bsz, kq * hh * pp, 2}));
      values = ad::reshape(values, {bsz * kq * hh * pp, c});
    } else {
      Var<T> sampled =
          ad::grid_sample(*maps[l], ad::reshape(locs, {bsz, kq * hh * pp, 2}));
      values = dl.value_lin(ad::reshape(sampled, {bsz * kq * hh * pp, c}));
    }
    Var<T> hv = ad::gather_head_blocks(values, hh, pp);  // (..., dh)
    head_values.push_back(ad::reshape(hv, {bsz * kq * hh, pp, dh}));
  }
  Var<T> v = head_values[0];
  for (int l = 1; l < lv; ++l) v = ad::concat_seq(v, head_values[static_cast<std::size_t>(l)]);
  Var<T> combined = ad::weighted_sum_groups(v, attn);  // (B*Kq*H, dh)
  Var<T> out = dl.out_lin(ad::reshape(combined, {bsz * kq, c}));
  return ad::reshape(out, {bsz, kq, c});
}

template <typename T>
Tensor<T> ContextTransformer<T>::deformable_attention_weights(
    int layer, const Var<T>& q_norm) const {
  ad::NoGradGuard ng;
  const DeformLayer& dl = layers_[static_cast<std::size_t>(layer)];
  const int bsz = q_norm.value().dim(0);
  const int kq = q_norm.value().dim(1);
  Var<T> flat = ad::reshape(q_norm, {bsz * kq, cfg.c_model});
  Var<T> weights = dl.weight_lin(flat);
  Var<T> attn = ad::softmax_rows(ad::reshape(
      weights, {bsz * kq * cfg.heads, cfg.num_levels * cfg.points}));
  return attn.value();
}

template <typename T>
Var<T> ContextTransformer<T>::predict_logits(const MaskedSequence& seq,
                                             const Tensor<T>& keypoints,
                                             const ImageContext<T>& ctx) const {
  seq.validate(cfg.codebook_size, cfg.num_tokens);
  const int bsz = seq.batch;
  const int m = cfg.num_tokens, c = cfg.c_model;
  if (keypoints.dim(0) != bsz || ctx.map1.value().dim(0) != bsz)
    throw InputError("predict_logits: batch mismatch");

  Var<T> tok = ad::embedding(token_table_, seq.tokens);  // (B*M, C)
  tok = ad::reshape(ad::add_tiled(tok, token_pos_), {bsz, m, c});
  Var<T> pose_ctx = embed_2d_pose(keypoints);  // (B, 21, C)
  pose_ctx = ad::reshape(
      ad::add_tiled(ad::reshape(pose_ctx, {bsz * cfg.num_keypoints, c}), ctx_pos_),
      {bsz, cfg.num_keypoints, c});

  Var<T> q = ad::concat_seq(tok, pose_ctx);  // (B, Kq, C)
  q = gapr_forward(q);
  q = ad::reshape(align_(ad::reshape(q, {bsz * cfg.num_queries(), c})),
                  {bsz, cfg.num_queries(), c});
  for (int l = 0; l < cfg.synth_layers; ++l) {
    const DeformLayer& dl = layers_[static_cast<std::size_t>(l)];
    q = ad::add(q, deformable_read(l, dl.ln_q(q), ctx));
    q = ad::add(q, ad::reshape(dl.self_attn(ad::reshape(dl.ln_s(q), q.value().shape())),
                               q.value().shape()));
    q = ad::add(q, ad::reshape(dl.mlp(dl.ln_m(q)), q.value().shape()));
  }
  q = final_ln_(q);
  Var<T> pose_rows = ad::slice_seq(ad::reshape(q, {bsz, cfg.num_queries(), c}), 0, m);
  Var<T> logits = logit_head_(ad::reshape(pose_rows, {bsz * m, c}));
  return ad::reshape(logits, {bsz, m, cfg.codebook_size});
}

template <typename T>
ShapeCameraOut<T> ContextTransformer<T>::predict_shape_camera(
    const ImageContext<T>& ctx) const {
  const int bsz = ctx.map1.value().dim(0);
  const int g = cfg.grid(), c = cfg.c_model;
  const T scale = T(1) / std::sqrt(static_cast<T>(c));
  Var<T> map_rows = ad::reshape(ctx.map1, {bsz * g * g, c});
  Var<T> kv = xattn_kv_(xattn_ln_(map_rows));  // (B*g2, 2C)
  Var<T> qrows = xattn_q_(xattn_queries_);     // (2, C)

  Var<T> collected;
  for (int b = 0; b < bsz; ++b) {
    Var<T> k = ad::slice_cols(
        ad::slice_rows(kv, static_cast<std::int64_t>(b) * g * g, g * g), 0, c);
    Var<T> v = ad::slice_cols(
        ad::slice_rows(kv, static_cast<std::int64_t>(b) * g * g, g * g), c, c);
    Var<T> scores = ad::scale(ad::matmul(qrows, ad::transpose2d(k)), scale);
    Var<T> out_b = ad::matmul(ad::softmax_rows(scores), v);  // (2, C)
    collected = b == 0 ? out_b : ad::concat_rows(collected, out_b);
  }
  Var<T> out = xattn_out_(collected);  // (B*2, C)
  Var<T> pairs = ad::reshape(out, {bsz, 2, c});
  Var<T> shape_rows = ad::reshape(ad::slice_seq(pairs, 0, 1), {bsz, c});
  Var<T> cam_rows = ad::reshape(ad::slice_seq(pairs, 1, 1), {bsz, c});

  ShapeCameraOut<T> res;
  res.beta = beta_head_(shape_rows);
  Var<T> raw = cam_head_(cam_rows);  // (B, 3)
  Var<T> xy = ad::slice_cols(raw, 0, 2);
  Var<T> z = ad::add_scalar(ad::softplus(ad::slice_cols(raw, 2, 1)),
                            static_cast<T>(cfg.z_min));
  res.translation = ad::concat_cols(xy, z);
  return res;
}

template <typename T>
Tensor<T> ContextTransformer<T>::reference_points() const {
  Tensor<T> out = ref_points_raw_.value();
  out.arr() = T(1) / (T(1) + (-out.arr()).exp());
  return out;
}

template <typename T>
io::ArrayStore ContextTransformer<T>::to_store() const {
  io::ArrayStore store;
  params.for_each([&](const std::string& name, const Var<T>& p) {
    store.put_tensor("param/" + name, p.value());
  });
  store.metadata()["kind"] = "context-transformer";
  store.metadata()["config"] = cfg.to_json();
  store.metadata()["config_hash"] = to_hex(cfg.hash());
  store.metadata()["scalar"] = std::is_same_v<T, float> ? "f32" : "f64";
  return store;
}

template <typename T>
ContextTransformer<T> ContextTransformer<T>::from_store(
    const io::ArrayStore& store) {
  if (store.metadata().value("kind", "") != "context-transformer")
    throw IntegrityError("checkpoint: not a context transformer");
  const TransformerConfig cfg =
      TransformerConfig::from_json(store.metadata().at("config"));
  ContextTransformer<T> model(cfg, /*seed=*/0);
  model.params.for_each([&](const std::string& name, Var<T>& p) {
    ad::Tensor<T> loaded = store.get("param/" + name).to_tensor<T>();
    if (loaded.shape() != p.value().shape())
      throw IntegrityError("checkpoint: shape mismatch for " + name);
    p.value() = std::move(loaded);
  });
  return model;
}

template class ContextTransformer<float>;
template class ContextTransformer<double>;

}  // namespace hmr::transformer
