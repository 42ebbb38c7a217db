#include "handiff/conditions.hpp"

#include <cmath>

namespace handiff {

int EncoderConfig::feature_size() const {
  int s = image_size;
  for (std::size_t i = 0; i < conv_channels.size(); ++i) s = ag::conv_out_size(s, 2);
  return s;
}

void EncoderConfig::validate(int token_dim) const {
  if (image_size < 8 || image_channels < 1) throw Error(ErrorKind::Config, "image size/channels invalid");
  if (conv_channels.empty()) throw Error(ErrorKind::Config, "image encoder needs at least one conv stage");
  for (int c : conv_channels)
    if (c < 1) throw Error(ErrorKind::Config, "conv channels must be positive");
  if (patch_grid < 1 || feature_size() % patch_grid != 0)
    throw Error(ErrorKind::Config, "patch grid must divide the final feature map side");
  if (mlp_hidden < 1) throw Error(ErrorKind::Config, "mlp_hidden must be positive");
  if (dropout < 0 || dropout >= 1) throw Error(ErrorKind::Config, "dropout must be in [0, 1)");
  if (heads < 1 || token_dim % heads != 0) throw Error(ErrorKind::Config, "token dim must be divisible by heads");
  if (skel2d_scale <= 0 || skel3d_scale <= 0) throw Error(ErrorKind::Config, "skeleton scales must be positive");
}

int ConditionTokens::unmasked() const {
  int n = 0;
  for (char m : mask) n += m ? 0 : 1;
  return n;
}

void MaskConfig::validate() const {
  for (double p : {p_m, p_all, p_image, p_skel})
    if (!(p >= 0 && p <= 1)) throw Error(ErrorKind::Config, "mask probabilities must lie in [0, 1]");
  if (!(sigma_joint2d >= 0) || !(sigma_joint3d >= 0)) throw Error(ErrorKind::Config, "joint noise must be >= 0");
}

int joint_finger(int joint) { return joint == 0 ? -1 : (joint - 1) / 4; }

MaskedBundle apply_random_masks(const ConditionBundle& bundle, const MaskConfig& config, Rng& rng, bool training) {
  if (!training) throw Error(ErrorKind::Usage, "random masks are only applied in training mode");
  config.validate();
  MaskedBundle out;
  MaskDecision& d = out.decision;
  if (uniform01(rng) < config.p_all) {
    d.all_dropped = true;
    d.image_dropped = bundle.image.has_value();
    d.skel2d_dropped = bundle.skel2d.has_value();
    d.skel3d_dropped = bundle.skel3d.has_value();
    return out;
  }
  ConditionBundle& b = out.bundle;
  if (bundle.image) {
    if (uniform01(rng) < config.p_m) {
      d.image_dropped = true;
    } else {
      if (bundle.patch_mask.empty())
        throw Error(ErrorKind::Input, "an image bundle needs its patch mask sized to the patch count");
      b.image = bundle.image;
      b.patch_mask = bundle.patch_mask;
      const std::size_t p = bundle.patch_mask.size();
      d.patches_dropped.assign(p, 0);
      for (std::size_t i = 0; i < p; ++i) {
        if (uniform01(rng) < config.p_image) {
          d.patches_dropped[i] = 1;
          b.patch_mask[i] = 1;
        }
      }
    }
  }
  if (bundle.skel2d) {
    if (uniform01(rng) < config.p_m) {
      d.skel2d_dropped = true;
    } else {
      Skeleton2D s = *bundle.skel2d;
      for (int j = 0; j < kNumJoints; ++j)
        for (int c = 0; c < 2; ++c) s.joints(j, c) += config.sigma_joint2d * standard_normal(rng);
      for (int f = 0; f < kNumFingers; ++f) {
        if (uniform01(rng) < config.p_skel) {
          d.fingers2d_dropped[f] = true;
          for (int k = 0; k < 4; ++k) s.confidence(finger_joint(f, k)) = 0.0;
        }
      }
      b.skel2d = std::move(s);
    }
  }
  if (bundle.skel3d) {
    if (uniform01(rng) < config.p_m) {
      d.skel3d_dropped = true;
    } else {
      Skeleton3D s = *bundle.skel3d;
      for (int j = 0; j < kNumJoints; ++j)
        for (int c = 0; c < 3; ++c) s.joints(j, c) += config.sigma_joint3d * standard_normal(rng);
      for (int f = 0; f < kNumFingers; ++f) {
        if (uniform01(rng) < config.p_skel) {
          d.fingers3d_dropped[f] = true;
          for (int k = 0; k < 4; ++k) s.valid(finger_joint(f, k)) = 0.0;
        }
      }
      b.skel3d = std::move(s);
    }
  }
  return out;
}

void init_encoder_params(const EncoderConfig& config, int token_dim, Rng& rng, ModelParams& params) {
  config.validate(token_dim);
  int cin = config.image_channels;
  for (std::size_t i = 0; i < config.conv_channels.size(); ++i) {
    const std::string name = "cond.img.conv" + std::to_string(i);
    add_linear(params, name, 9 * cin, config.conv_channels[i], rng);
    cin = config.conv_channels[i];
  }
  add_linear(params, "cond.img.proj", cin, token_dim, rng);
  params.tensors["cond.img.pos"] = init_normal(rng, config.patches(), token_dim, 0.02);
  params.tensors["cond.img.global"] = init_normal(rng, 1, token_dim, 0.02);
  add_attention_layer(params, "cond.img.attn", token_dim, token_dim, rng);
  add_layer_norm(params, "cond.img.mlp_ln", token_dim);
  add_linear(params, "cond.img.mlp1", token_dim, 2 * token_dim, rng);
  add_linear(params, "cond.img.mlp2", 2 * token_dim, token_dim, rng, 0.5);

  const int in2 = kNumJoints * 3, in3 = kNumJoints * 4;
  add_linear(params, "cond.s2d.l1", in2, config.mlp_hidden, rng);
  add_linear(params, "cond.s2d.l2", config.mlp_hidden, config.mlp_hidden, rng);
  add_linear(params, "cond.s2d.l3", config.mlp_hidden, token_dim, rng);
  add_linear(params, "cond.s3d.l1", in3, config.mlp_hidden, rng);
  add_linear(params, "cond.s3d.l2", config.mlp_hidden, config.mlp_hidden, rng);
  add_linear(params, "cond.s3d.l3", config.mlp_hidden, token_dim, rng);
}

namespace {

// P x (fs * fs) average over patch_grid x patch_grid blocks of the feature map.
Mat patch_pool_matrix(int fs, int grid) {
  const int cell = fs / grid;
  Mat m = Mat::Zero(grid * grid, fs * fs);
  const double w = 1.0 / (cell * cell);
  for (int y = 0; y < fs; ++y)
    for (int x = 0; x < fs; ++x) m((y / cell) * grid + x / cell, y * fs + x) = w;
  return m;
}

ag::Var dropout(ag::Var x, double rate, Rng* rng) {
  if (!rng || rate <= 0) return x;
  Mat keep(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < keep.size(); ++i)
    keep.data()[i] = uniform01(*rng) < rate ? 0.0 : 1.0 / (1.0 - rate);
  return ag::mul_const(x, keep);
}

ag::Var skeleton_mlp(const ParamSet& p, const std::string& prefix, const EncoderConfig& config, const Mat& input,
                     Rng* rng) {
  ag::Var x = p.tape().constant(input);
  x = dropout(ag::gelu(linear(p, prefix + ".l1", x)), config.dropout, rng);
  x = dropout(ag::gelu(linear(p, prefix + ".l2", x)), config.dropout, rng);
  return linear(p, prefix + ".l3", x);
}

void check_unit_interval(const Vec& v, const char* what) {
  for (Eigen::Index i = 0; i < v.size(); ++i)
    if (!(v(i) >= 0 && v(i) <= 1)) throw Error(ErrorKind::Input, std::string(what) + " must lie in [0, 1]");
}

}  // namespace

ag::Var encode_image_var(const ParamSet& p, const EncoderConfig& config, int token_dim, const Image& image,
                         const std::vector<char>& patch_mask) {
  if (image.height != config.image_size || image.width != config.image_size ||
      image.channels != config.image_channels)
    throw Error(ErrorKind::Input, "image shape does not match the encoder configuration");
  ag::Tape& tape = p.tape();
  ag::Var x = tape.constant(image.as_pixels());
  int side = config.image_size;
  for (std::size_t i = 0; i < config.conv_channels.size(); ++i) {
    const std::string name = "cond.img.conv" + std::to_string(i);
    x = ag::gelu(ag::conv3x3(x, side, side, p[name + ".w"], p[name + ".b"], 2));
    side = ag::conv_out_size(side, 2);
  }
  ag::Var patches = ag::matmul(tape.constant(patch_pool_matrix(side, config.patch_grid)), x);
  ag::Var tok = ag::add(linear(p, "cond.img.proj", patches), p["cond.img.pos"]);
  ag::Var h = ag::concat_rows({tok, p["cond.img.global"]});
  std::vector<char> keys;
  if (!patch_mask.empty()) {
    keys = patch_mask;
    keys.push_back(0);
  }
  h = ag::add(h, attention_layer(p, "cond.img.attn", h, nullptr, config.heads, keys));
  ag::Var m = ag::gelu(linear(p, "cond.img.mlp1", layer_norm(p, "cond.img.mlp_ln", h)));
  (void)token_dim;
  return ag::add(h, linear(p, "cond.img.mlp2", m));
}

ag::Var encode_skel2d_var(const ParamSet& p, const EncoderConfig& config, const Skeleton2D& skel, Rng* rng) {
  if (skel.joints.rows() != kNumJoints || skel.joints.cols() != 2 || skel.confidence.size() != kNumJoints)
    throw Error(ErrorKind::Input, "2D skeleton must be 21 x 2 with 21 confidences");
  check_unit_interval(skel.confidence, "confidences");
  Mat in(1, kNumJoints * 3);
  for (int j = 0; j < kNumJoints; ++j) {
    const double c = skel.confidence(j);
    const bool on = c > 0;
    in(0, 3 * j + 0) = on ? (skel.joints(j, 0) - config.skel2d_center) / config.skel2d_scale : 0.0;
    in(0, 3 * j + 1) = on ? (skel.joints(j, 1) - config.skel2d_center) / config.skel2d_scale : 0.0;
    in(0, 3 * j + 2) = c;
  }
  return skeleton_mlp(p, "cond.s2d", config, in, rng);
}

ag::Var encode_skel3d_var(const ParamSet& p, const EncoderConfig& config, const Skeleton3D& skel, Rng* rng) {
  if (skel.joints.rows() != kNumJoints || skel.joints.cols() != 3 || skel.valid.size() != kNumJoints)
    throw Error(ErrorKind::Input, "3D skeleton must be 21 x 3 with 21 validity flags");
  check_unit_interval(skel.valid, "validity flags");
  Mat in(1, kNumJoints * 4);
  for (int j = 0; j < kNumJoints; ++j) {
    const double v = skel.valid(j);
    for (int c = 0; c < 3; ++c) in(0, 4 * j + c) = v > 0 ? skel.joints(j, c) / config.skel3d_scale : 0.0;
    in(0, 4 * j + 3) = v;
  }
  return skeleton_mlp(p, "cond.s3d", config, in, rng);
}

TokenVars assemble_tokens_var(const ParamSet& p, const EncoderConfig& config, int token_dim,
                              const ConditionBundle& bundle, Rng* rng) {
  ag::Tape& tape = p.tape();
  const int np = config.patches();
  TokenVars out;
  out.mask.assign(np + 3, 1);
  std::vector<ag::Var> parts;
  if (bundle.image) {
    if (!bundle.patch_mask.empty() && static_cast<int>(bundle.patch_mask.size()) != np)
      throw Error(ErrorKind::Input, "patch mask length does not match the patch count");
    parts.push_back(encode_image_var(p, config, token_dim, *bundle.image, bundle.patch_mask));
    for (int i = 0; i < np; ++i) out.mask[i] = bundle.patch_mask.empty() ? 0 : (bundle.patch_mask[i] ? 1 : 0);
    out.mask[np] = 0;
  } else {
    parts.push_back(tape.constant(Mat::Zero(np + 1, token_dim)));
  }
  if (bundle.skel2d) {
    parts.push_back(encode_skel2d_var(p, config, *bundle.skel2d, rng));
    out.mask[np + 1] = 0;
  } else {
    parts.push_back(tape.constant(Mat::Zero(1, token_dim)));
  }
  if (bundle.skel3d) {
    parts.push_back(encode_skel3d_var(p, config, *bundle.skel3d, rng));
    out.mask[np + 2] = 0;
  } else {
    parts.push_back(tape.constant(Mat::Zero(1, token_dim)));
  }
  out.tokens = ag::concat_rows(parts);
  return out;
}

Mat encode_image(const ModelParams& params, const EncoderConfig& config, int token_dim, const Image& image) {
  ag::Tape tape;
  ParamSet p(tape, params, false);
  return encode_image_var(p, config, token_dim, image).value();
}

Mat encode_skel2d(const ModelParams& params, const EncoderConfig& config, const Skeleton2D& skel) {
  ag::Tape tape;
  ParamSet p(tape, params, false);
  return encode_skel2d_var(p, config, skel).value();
}

Mat encode_skel3d(const ModelParams& params, const EncoderConfig& config, const Skeleton3D& skel) {
  ag::Tape tape;
  ParamSet p(tape, params, false);
  return encode_skel3d_var(p, config, skel).value();
}

ConditionTokens assemble_tokens(const ModelParams& params, const EncoderConfig& config, int token_dim,
                                const ConditionBundle& bundle) {
  ag::Tape tape;
  ParamSet p(tape, params, false);
  TokenVars tv = assemble_tokens_var(p, config, token_dim, bundle);
  return ConditionTokens{tv.tokens.value(), tv.mask};
}

ConditionBundle bundle_from_sample(const HandSample& sample, const EncoderConfig& config) {
  ConditionBundle b;
  if (sample.image) {
    b.image = sample.image;
    b.patch_mask.assign(config.patches(), 0);
  }
  b.skel2d = Skeleton2D{sample.joints2d, sample.confidence};
  Mat rel = sample.joints3d.rowwise() - sample.joints3d.row(0);
  b.skel3d = Skeleton3D{rel, Vec::Ones(kNumJoints)};
  return b;
}

ConditionTokens empty_tokens(const EncoderConfig& config, int token_dim) {
  const int rows = config.patches() + 3;
  return ConditionTokens{Mat::Zero(rows, token_dim), std::vector<char>(rows, 1)};
}

}  // namespace handiff
