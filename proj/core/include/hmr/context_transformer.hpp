#pragma once

#include "hmr/array_store.hpp"
#include "hmr/hand_model.hpp"
#include "hmr/nn.hpp"
#include "hmr/run_config.hpp"

namespace hmr::transformer {

using ad::Tensor;
using ad::Var;

struct TransformerConfig {
  int c_model = 128;
  int heads = 4;
  int enc_blocks = 4;
  int synth_layers = 4;  // deformable cross-attention layers (N)
  int gapr_blocks = 2;   // graph transformer blocks (B)
  int mlp_ratio = 2;
  int patch = 16;
  int image_size = 224;
  int points = 4;      // sampling points per level per head
  int num_levels = 2;  // 1x and 4x scales
  int num_tokens = 64;
  int codebook_size = 256;
  int num_keypoints = 21;
  int num_labels = 0;  // > 0 enables label conditioning
  double z_min = 0.3;
  double focal_px = 1000.0;

  int grid() const { return image_size / patch; }
  int num_queries() const { return num_tokens + num_keypoints; }
  void validate() const;
  nlohmann::json to_json() const;
  static TransformerConfig from_json(const nlohmann::json& j);
  std::uint64_t hash() const;
  static TransformerConfig from_config(const ConfigMap& cfg,
                                       const std::string& prefix = "model.");
};

/// Multi-scale image features: 1x (grid) and 4x (grid * 4) maps, (B,H,W,C).
template <typename T>
struct ImageContext {
  Var<T> map1;
  Var<T> map4;

  int batch() const { return map1.value().dim(0); }
};

/// Partially masked token sequence; masked positions carry the sentinel id K.
struct MaskedSequence {
  std::vector<int> tokens;           // length B*M, values in [0, K]
  std::vector<std::uint8_t> mask;    // tokens[i] == K  <=>  mask[i]
  int batch = 1;

  void validate(int k, int m) const {
    if (tokens.size() != mask.size() ||
        tokens.size() != static_cast<std::size_t>(batch) * m)
      throw InputError("masked sequence: size mismatch");
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (tokens[i] < 0 || tokens[i] > k)
        throw TokenError("masked sequence: token id out of range");
      if ((tokens[i] == k) != (mask[i] != 0))
        throw InputError("masked sequence: sentinel/mask disagreement");
    }
  }
};

/// The fixed 21-keypoint hand skeleton adjacency, normalized:
/// D^{-1/2} (A + I) D^{-1/2}.
Tensor<double> normalized_hand_adjacency();

template <typename T>
struct ShapeCameraOut {
  Var<T> beta;         // (B, 10), unclamped head output
  Var<T> translation;  // (B, 3), positive-depth parameterization
};

template <typename T>
class ContextTransformer {
 public:
  TransformerConfig cfg;
  nn::ParamStore<T> params;

  ContextTransformer() = default;
  ContextTransformer(const TransformerConfig& config, std::uint64_t seed);

  // -- image pathway ---------------------------------------------------------
  /// images (B, S, S, 3) in [0, 1]; deterministic in eval mode.
  ImageContext<T> encode_image(const Tensor<T>& images) const;
  /// All-zero feature maps (unconditional prior mode).
  ImageContext<T> zero_context(int batch) const;
  /// Label-embedding conditioning projected into the image-context slot.
  ImageContext<T> label_context(const std::vector<int>& labels) const;

  // -- 2D pose pathway -------------------------------------------------------
  /// keypoints (B, 21, 3) as (u px, v px, confidence); coordinates are
  /// normalized by the image size before the GCN.
  Var<T> embed_2d_pose(const Tensor<T>& keypoints) const;
  /// Same GCN with an explicit normalized adjacency (equivariance tests).
  Var<T> embed_2d_pose_with(const Tensor<T>& adjacency,
                            const Tensor<T>& keypoints) const;

  // -- GAPR ------------------------------------------------------------------
  Var<T> gapr_graph_blocks(const Var<T>& q) const;
  /// Eq: Q' = MHA(Norm(Q_C)) + Conv(Norm(Q_C)) + Q_C.
  Var<T> gapr_refine_residual(const Var<T>& q) const;
  /// Eq: Q_GAPR = SE(Norm(Q')); `force_gate_one` bypasses the channel gate.
  Var<T> gapr_se_gate(const Var<T>& q, bool force_gate_one = false) const;
  Var<T> gapr_forward(const Var<T>& q) const;

  // -- synthesizer -----------------------------------------------------------
  /// Single deformable cross-attention read for layer `layer` given
  /// already-normalized queries; exposed for the degenerate-case tests.
  Var<T> deformable_read(int layer, const Var<T>& queries_norm,
                         const ImageContext<T>& ctx) const;
  /// Softmaxed sampling weights of a layer, rows (B*Kq*heads, levels*points).
  Tensor<T> deformable_attention_weights(int layer,
                                         const Var<T>& queries_norm) const;

  /// Logits over the codebook for every pose-token position: (B, M, K).
  Var<T> predict_logits(const MaskedSequence& seq, const Tensor<T>& keypoints,
                        const ImageContext<T>& ctx) const;

  /// x-Attention head over the 1x map.
  ShapeCameraOut<T> predict_shape_camera(const ImageContext<T>& ctx) const;

  void freeze() { params.freeze(); }

  io::ArrayStore to_store() const;
  static ContextTransformer from_store(const io::ArrayStore& store);

  /// Reference points (Q_q, 2) in [0,1]^2 after the sigmoid.
  Tensor<T> reference_points() const;

 private:
  Var<T> patch_embed(const Tensor<T>& images) const;

  // image encoder
  nn::Linear<T> patch_proj_;
  Var<T> pos_emb_;  // (grid^2, C)
  std::vector<nn::TransformerBlock<T>> enc_blocks_;
  nn::LayerNorm<T> enc_ln_;
  nn::Linear<T> scale1_proj_;
  nn::Linear<T> up1_, up2_, up3_;  // C->4*(C/2), C/2->4*(C/4), C/4->C

  // label conditioning
  Var<T> label_table_;  // (num_labels, C) when enabled
  nn::Linear<T> label_proj1_, label_proj4_;

  // 2D pose GCN
  Tensor<T> adjacency_;  // normalized, (21, 21)
  nn::Linear<T> gcn1_, gcn2_;

  // token embeddings
  Var<T> token_table_;  // (K + 1, C), row K is [MASK]
  Var<T> token_pos_;    // (M, C)
  Var<T> ctx_pos_;      // (21, C)

  // GAPR
  std::vector<nn::TransformerBlock<T>> gapr_blocks_;
  std::vector<Var<T>> gapr_adjacency_;  // learnable (Kq, Kq) per block
  nn::LayerNorm<T> eq1_ln_;
  nn::SelfAttention<T> eq1_attn_;
  nn::Linear<T> eq1_conv_;
  nn::LayerNorm<T> eq2_ln_;
  nn::Linear<T> se_fc1_, se_fc2_;
  nn::Linear<T> align_;  // 1x1 conv after the SE gate

  // synthesizer
  struct DeformLayer {
    nn::LayerNorm<T> ln_q;
    nn::Linear<T> offset_lin;  // C -> L*H*P*2, level-major
    nn::Linear<T> weight_lin;  // C -> H*L*P, head-major
    nn::Linear<T> value_lin;   // C -> C
    nn::Linear<T> out_lin;     // C -> C
    nn::LayerNorm<T> ln_s;
    nn::SelfAttention<T> self_attn;
    nn::LayerNorm<T> ln_m;
    nn::Mlp<T> mlp;
  };
  std::vector<DeformLayer> layers_;
  Var<T> ref_points_raw_;  // (Kq, 2), sigmoid-parameterized
  nn::LayerNorm<T> final_ln_;
  nn::Linear<T> logit_head_;

  // x-Attention head
  Var<T> xattn_queries_;  // (2, C)
  nn::LayerNorm<T> xattn_ln_;
  nn::Linear<T> xattn_q_, xattn_kv_, xattn_out_;
  nn::Linear<T> beta_head_, cam_head_;
};

}  // namespace hmr::transformer
