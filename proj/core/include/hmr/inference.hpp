#pragma once

#include "hmr/context_transformer.hpp"
#include "hmr/pose_tokenizer.hpp"

namespace hmr::infer {

using ad::Tensor;
using ad::Var;

struct DecodeSchedule {
  int iterations = 5;       // T
  double temperature = 1.0;
  int top_k = 0;            // 0 disables the per-position restriction
  bool record_iterations = false;  // keep per-iteration sequence snapshots

  void validate() const {
    if (iterations < 1) throw InputError("schedule: iterations must be >= 1");
    if (!(temperature > 0.0)) throw InputError("schedule: temperature must be > 0");
    if (top_k < 0) throw InputError("schedule: top_k must be >= 0");
  }
};

/// ceil(cos(pi t / (2T)) * L); the final iteration re-masks nothing.
int remask_count(int t, int iterations, int length);

/// Per-iteration bookkeeping (masked counts and kept-token confidence).
struct DecodeTrace {
  std::vector<int> masked_entering;        // size T
  std::vector<double> mean_kept_confidence;  // size T
};

struct Hypothesis {
  std::vector<int> tokens;
  std::vector<double> token_probs;  // probability at the keeping iteration
  double confidence = 0.0;          // mean log probability
  hand::PoseParams pose;
  hand::ShapeParams shape;
  hand::CameraParams camera;
  hand::HandMesh mesh;
  double aiti_seconds = 0.0;
  DecodeTrace trace;

  nlohmann::json to_json() const;
};

struct DecodeResult {
  std::vector<int> tokens;
  std::vector<double> token_probs;
  double confidence = 0.0;
  DecodeTrace trace;
  /// Sequence state entering each iteration (sentinel K at masked slots);
  /// populated when the schedule records iterations.
  std::vector<std::vector<int>> iteration_tokens;
};

/// Frozen-weight decoding front end tying the transformer, the tokenizer and
/// the hand template together.
template <typename T>
class Decoder {
 public:
  Decoder(const transformer::ContextTransformer<T>& model,
          const tokenizer::PoseTokenizer<T>& tok,
          const hand::HandTemplate<double>& tpl)
      : model_(model), tok_(tok), tpl_(tpl) {
    if (model.cfg.num_tokens != tok.cfg.num_tokens ||
        model.cfg.codebook_size != tok.cfg.codebook_size)
      throw ConfigError("decoder: transformer/tokenizer token contract mismatch");
  }

  /// Progressive unmasking: starts fully masked, samples masked positions,
  /// keeps the most confident draws and re-masks the rest per the schedule.
  /// Kept tokens are never resampled.
  DecodeResult iterative_decode(const Tensor<T>& keypoints,
                                const transformer::ImageContext<T>& ctx,
                                const DecodeSchedule& schedule, Rng& rng) const;

  /// Image + 2D keypoints -> ranked single hypothesis (mesh attached).
  Hypothesis reconstruct(const Tensor<float>& image,
                         const Tensor<double>& keypoints2d,
                         const DecodeSchedule& schedule, Rng& rng) const;

  /// Zeroed conditioning, top-k restricted sampling, confidence-sorted.
  std::vector<Hypothesis> generate_unconditional(int n,
                                                 const DecodeSchedule& schedule,
                                                 Rng& rng) const;

  /// Label-embedding conditioning; per-position sampling restricted to the
  /// top 5% of the vocabulary.
  std::vector<Hypothesis> generate_from_label(int label, int n,
                                              const DecodeSchedule& schedule,
                                              Rng& rng) const;

  /// Detokenize + limit clamp + FK; shared by the generation paths.
  Hypothesis finalize(const DecodeResult& dec, const hand::ShapeParams& shape,
                      const hand::CameraParams& camera, bool clamp_pose) const;

  const transformer::ContextTransformer<T>& model() const { return model_; }
  const tokenizer::PoseTokenizer<T>& tokenizer() const { return tok_; }
  const hand::HandTemplate<double>& hand_template() const { return tpl_; }

 private:
  hand::CameraParams camera_from(const Var<T>& translation, int row) const;
  hand::ShapeParams shape_from(const Var<T>& beta, int row) const;

  const transformer::ContextTransformer<T>& model_;
  const tokenizer::PoseTokenizer<T>& tok_;
  hand::HandTemplate<double> tpl_;
};

}  // namespace hmr::infer
