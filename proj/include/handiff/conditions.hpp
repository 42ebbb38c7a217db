#pragma once

#include "handiff/params.hpp"
#include "handiff/synth_hand.hpp"

#include <array>
#include <optional>
#include <vector>

namespace handiff {

struct EncoderConfig {
  int image_size = 128;
  int image_channels = 2;
  std::vector<int> conv_channels{8, 16, 32, 32};  // one stride-2 3x3 conv each
  int patch_grid = 4;                             // P = patch_grid^2 patch tokens
  int mlp_hidden = 128;
  double dropout = 0.1;
  int heads = 4;
  // 2D joints enter as (uv - center) / scale, 3D joints as mm / scale3d.
  double skel2d_center = 64.0;
  double skel2d_scale = 64.0;
  double skel3d_scale = 100.0;

  int patches() const { return patch_grid * patch_grid; }
  int feature_size() const;  // spatial side of the last conv map
  void validate(int token_dim) const;
};

struct Skeleton2D {
  Mat joints;      // 21 x 2 px
  Vec confidence;  // 21, in [0, 1]
};

struct Skeleton3D {
  Mat joints;  // 21 x 3 mm, wrist-relative model frame
  Vec valid;   // 21, in [0, 1]
};

struct ConditionBundle {
  std::optional<Image> image;
  std::vector<char> patch_mask;  // P flags when an image is present; true = patch dropped
  std::optional<Skeleton2D> skel2d;
  std::optional<Skeleton3D> skel3d;

  bool is_empty() const { return !image && !skel2d && !skel3d; }
};

// Rows: [P patches, global image token, skel2d token, skel3d token].
struct ConditionTokens {
  Mat tokens;
  std::vector<char> mask;  // true = excluded from attention

  int unmasked() const;
};

struct TokenVars {
  ag::Var tokens;
  std::vector<char> mask;
};

struct MaskConfig {
  double p_m = 0.1;
  double p_all = 0.1;
  double p_image = 0.3;
  double p_skel = 0.3;
  double sigma_joint3d = 5.0;
  double sigma_joint2d = 2.0;

  void validate() const;
};

struct MaskDecision {
  bool all_dropped = false;
  bool image_dropped = false;
  bool skel2d_dropped = false;
  bool skel3d_dropped = false;
  std::vector<char> patches_dropped;
  std::array<bool, kNumFingers> fingers2d_dropped{};
  std::array<bool, kNumFingers> fingers3d_dropped{};
};

struct MaskedBundle {
  ConditionBundle bundle;
  MaskDecision decision;
};

// Two-level masking for training. Throws a usage error when training is false.
MaskedBundle apply_random_masks(const ConditionBundle& bundle, const MaskConfig& config, Rng& rng,
                                bool training = true);

void init_encoder_params(const EncoderConfig& config, int token_dim, Rng& rng, ModelParams& params);

// Dropout is active only when dropout_rng is non-null.
// Dropped patches are also hidden from the patch transformer.
ag::Var encode_image_var(const ParamSet& p, const EncoderConfig& config, int token_dim, const Image& image,
                         const std::vector<char>& patch_mask = {});
ag::Var encode_skel2d_var(const ParamSet& p, const EncoderConfig& config, const Skeleton2D& skel,
                          Rng* dropout_rng = nullptr);
ag::Var encode_skel3d_var(const ParamSet& p, const EncoderConfig& config, const Skeleton3D& skel,
                          Rng* dropout_rng = nullptr);
TokenVars assemble_tokens_var(const ParamSet& p, const EncoderConfig& config, int token_dim,
                              const ConditionBundle& bundle, Rng* dropout_rng = nullptr);

Mat encode_image(const ModelParams& params, const EncoderConfig& config, int token_dim, const Image& image);
Mat encode_skel2d(const ModelParams& params, const EncoderConfig& config, const Skeleton2D& skel);
Mat encode_skel3d(const ModelParams& params, const EncoderConfig& config, const Skeleton3D& skel);
ConditionTokens assemble_tokens(const ModelParams& params, const EncoderConfig& config, int token_dim,
                                const ConditionBundle& bundle);

// All three modalities of a record (image only when present); 3D joints are
// made wrist-relative.
ConditionBundle bundle_from_sample(const HandSample& sample, const EncoderConfig& config);

// Fully masked tokens for unconditional sampling.
ConditionTokens empty_tokens(const EncoderConfig& config, int token_dim);

// Finger each joint belongs to, -1 for the wrist.
int joint_finger(int joint);

}  // namespace handiff
