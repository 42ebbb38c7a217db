#include "handiff/conditions.hpp"
#include "test_util.hpp"

using namespace handiff;
using namespace handiff::testing;

namespace {

constexpr int kTokenDim = 8;

EncoderConfig small_encoder() {
  EncoderConfig c;
  c.image_size = 32;
  c.conv_channels = {4, 6};
  c.patch_grid = 4;
  c.mlp_hidden = 16;
  c.heads = 2;
  c.skel2d_center = 16;
  c.skel2d_scale = 16;
  return c;
}

ModelParams encoder_params(const EncoderConfig& c, std::uint64_t seed = 1) {
  ModelParams p;
  Rng rng(seed);
  init_encoder_params(c, kTokenDim, rng, p);
  return p;
}

Image random_image(Rng& rng, int side, int channels = 2) {
  Image img;
  img.height = img.width = side;
  img.channels = channels;
  for (int i = 0; i < side * side * channels; ++i) img.data.push_back(static_cast<float>(uniform01(rng)));
  return img;
}

ConditionBundle full_bundle(Rng& rng, const EncoderConfig& c) {
  ConditionBundle b;
  b.image = random_image(rng, c.image_size);
  b.patch_mask.assign(c.patches(), 0);
  b.skel2d = Skeleton2D{randn(rng, kNumJoints, 2) * 5.0 + Mat::Constant(kNumJoints, 2, 16.0), Vec::Ones(kNumJoints)};
  b.skel3d = Skeleton3D{randn(rng, kNumJoints, 3) * 30.0, Vec::Ones(kNumJoints)};
  return b;
}

int masked_count(const ConditionTokens& t) { return static_cast<int>(t.mask.size()) - t.unmasked(); }

}  // namespace

TEST_CASE("encode_image: token count, sensitivity, determinism and shape errors") {
  const EncoderConfig c = small_encoder();
  const ModelParams p = encoder_params(c);
  Rng rng(2);
  const Image a = random_image(rng, 32), b = random_image(rng, 32);
  const Mat ta = encode_image(p, c, kTokenDim, a);
  CHECK(ta.rows() == c.patches() + 1);
  CHECK(ta.cols() == kTokenDim);
  CHECK((ta - encode_image(p, c, kTokenDim, b)).cwiseAbs().maxCoeff() > 1e-9);
  Image zero = a;
  std::fill(zero.data.begin(), zero.data.end(), 0.0f);
  CHECK(encode_image(p, c, kTokenDim, zero) == encode_image(p, c, kTokenDim, zero));
  try {
    encode_image(p, c, kTokenDim, random_image(rng, 16));
    FAIL("expected input error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Input);
  }
  CHECK_THROWS_AS(encode_image(p, c, kTokenDim, random_image(rng, 32, 3)), Error);

  EncoderConfig wide_grid = c;
  wide_grid.image_size = 64;
  wide_grid.patch_grid = 8;
  wide_grid.conv_channels = {4, 4, 4};
  CHECK(encode_image(encoder_params(wide_grid), wide_grid, kTokenDim, random_image(rng, 64)).rows() == 65);
}

TEST_CASE("encoder config validation") {
  EncoderConfig c = small_encoder();
  c.patch_grid = 3;  // 8 x 8 feature map
  CHECK_THROWS_AS(c.validate(kTokenDim), Error);
  c = small_encoder();
  c.dropout = 1.0;
  CHECK_THROWS_AS(c.validate(kTokenDim), Error);
  c = small_encoder();
  CHECK_THROWS_AS(c.validate(7), Error);
  CHECK(c.feature_size() == 8);
}

TEST_CASE("skeleton encoders: shape, invalid joints and sensitivity") {
  const EncoderConfig c = small_encoder();
  const ModelParams p = encoder_params(c);
  Rng rng(3);
  Skeleton2D s2{randn(rng, kNumJoints, 2) * 10.0, Vec::Ones(kNumJoints)};
  Skeleton3D s3{randn(rng, kNumJoints, 3) * 40.0, Vec::Ones(kNumJoints)};
  const Mat e2 = encode_skel2d(p, c, s2), e3 = encode_skel3d(p, c, s3);
  CHECK(e2.rows() == 1);
  CHECK(e2.cols() == kTokenDim);
  CHECK(e3.cols() == kTokenDim);

  // Every joint invalid: the input is all zeros whatever the coordinates.
  Skeleton2D off2{randn(rng, kNumJoints, 2) * 10.0, Vec::Zero(kNumJoints)};
  Skeleton2D off2b{randn(rng, kNumJoints, 2) * 99.0, Vec::Zero(kNumJoints)};
  CHECK(encode_skel2d(p, c, off2) == encode_skel2d(p, c, off2b));
  Skeleton3D off3{randn(rng, kNumJoints, 3), Vec::Zero(kNumJoints)};
  Skeleton3D off3b{randn(rng, kNumJoints, 3) * 7.0, Vec::Zero(kNumJoints)};
  CHECK(encode_skel3d(p, c, off3) == encode_skel3d(p, c, off3b));

  Skeleton2D moved = s2;
  moved.joints(7, 0) += 1.0;
  CHECK((encode_skel2d(p, c, moved) - e2).cwiseAbs().maxCoeff() > 1e-9);
  Skeleton3D moved3 = s3;
  moved3.joints(12, 2) += 1.0;
  CHECK((encode_skel3d(p, c, moved3) - e3).cwiseAbs().maxCoeff() > 1e-9);
  // An invalid joint is ignored entirely.
  Skeleton3D hidden = s3, hidden_moved = s3;
  hidden.valid(12) = hidden_moved.valid(12) = 0;
  hidden_moved.joints(12, 2) += 50.0;
  CHECK(encode_skel3d(p, c, hidden) == encode_skel3d(p, c, hidden_moved));

  try {
    encode_skel2d(p, c, Skeleton2D{Mat::Zero(20, 2), Vec::Ones(20)});
    FAIL("expected input error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Input);
  }
  Skeleton3D bad = s3;
  bad.valid(0) = 1.5;
  CHECK_THROWS_AS(encode_skel3d(p, c, bad), Error);
}

TEST_CASE("skeleton encoders: dropout only with a generator") {
  EncoderConfig c = small_encoder();
  c.dropout = 0.5;
  const ModelParams p = encoder_params(c);
  Rng rng(4);
  ConditionBundle b;
  b.skel3d = Skeleton3D{randn(rng, kNumJoints, 3) * 40.0, Vec::Ones(kNumJoints)};
  ag::Tape t;
  ParamSet ps(t, p, false);
  const Mat eval = assemble_tokens_var(ps, c, kTokenDim, b).tokens.value();
  CHECK(eval == assemble_tokens(p, c, kTokenDim, b).tokens);
  Rng d1(5), d2(5);
  const Mat x1 = assemble_tokens_var(ps, c, kTokenDim, b, &d1).tokens.value();
  const Mat x2 = assemble_tokens_var(ps, c, kTokenDim, b, &d2).tokens.value();
  CHECK(x1 == x2);
  CHECK((x1 - eval).cwiseAbs().maxCoeff() > 1e-9);
}

TEST_CASE("assemble_tokens: layout and masks per bundle") {
  const EncoderConfig c = small_encoder();
  const ModelParams p = encoder_params(c);
  const int np = c.patches();
  Rng rng(6);

  const ConditionTokens empty = assemble_tokens(p, c, kTokenDim, ConditionBundle{});
  CHECK(empty.tokens.rows() == np + 3);
  CHECK(empty.unmasked() == 0);
  const ConditionTokens e2 = empty_tokens(c, kTokenDim);
  CHECK(e2.tokens.rows() == np + 3);
  CHECK(e2.unmasked() == 0);

  ConditionBundle full = full_bundle(rng, c);
  const ConditionTokens all = assemble_tokens(p, c, kTokenDim, full);
  CHECK(masked_count(all) == 0);
  CHECK(all.tokens.topRows(np + 1) == encode_image(p, c, kTokenDim, *full.image));
  CHECK(all.tokens.row(np + 1) == encode_skel2d(p, c, *full.skel2d).row(0));
  CHECK(all.tokens.row(np + 2) == encode_skel3d(p, c, *full.skel3d).row(0));

  ConditionBundle image_only;
  image_only.image = full.image;
  image_only.patch_mask.assign(np, 0);
  const ConditionTokens img = assemble_tokens(p, c, kTokenDim, image_only);
  for (int i = 0; i <= np; ++i) CHECK(img.mask[i] == 0);
  CHECK(img.mask[np + 1] == 1);
  CHECK(img.mask[np + 2] == 1);

  ConditionBundle patchy = image_only;
  patchy.patch_mask[3] = patchy.patch_mask[9] = 1;
  const ConditionTokens pt = assemble_tokens(p, c, kTokenDim, patchy);
  CHECK(pt.mask[3] == 1);
  CHECK(pt.mask[9] == 1);
  CHECK(pt.mask[np] == 0);  // global token survives patch drops
  CHECK(masked_count(pt) == 4);

  ConditionBundle wrong = image_only;
  wrong.patch_mask.assign(np - 1, 0);
  CHECK_THROWS_AS(assemble_tokens(p, c, kTokenDim, wrong), Error);
}

TEST_CASE("apply_random_masks: degenerate probabilities and training guard") {
  const EncoderConfig c = small_encoder();
  Rng rng(7);
  const ConditionBundle b = full_bundle(rng, c);
  MaskConfig off;
  off.p_m = off.p_all = off.p_image = off.p_skel = 0.0;
  off.sigma_joint2d = off.sigma_joint3d = 0.0;
  for (int i = 0; i < 20; ++i) {
    const MaskedBundle m = apply_random_masks(b, off, rng);
    CHECK(m.bundle.image->data == b.image->data);
    CHECK(m.bundle.patch_mask == b.patch_mask);
    CHECK(m.bundle.skel2d->joints == b.skel2d->joints);
    CHECK(m.bundle.skel2d->confidence == b.skel2d->confidence);
    CHECK(m.bundle.skel3d->joints == b.skel3d->joints);
    CHECK(m.bundle.skel3d->valid == b.skel3d->valid);
  }
  MaskConfig always;
  always.p_all = 1.0;
  for (int i = 0; i < 20; ++i) {
    const MaskedBundle m = apply_random_masks(b, always, rng);
    CHECK(m.bundle.is_empty());
    CHECK(m.decision.all_dropped);
  }
  try {
    apply_random_masks(b, MaskConfig{}, rng, false);
    FAIL("expected usage error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Usage);
  }
  MaskConfig bad;
  bad.p_image = 1.2;
  CHECK_THROWS_AS(apply_random_masks(b, bad, rng), Error);
  bad = MaskConfig{};
  bad.sigma_joint2d = -1;
  CHECK_THROWS_AS(apply_random_masks(b, bad, rng), Error);

  Rng r1(8), r2(8);
  const MaskedBundle m1 = apply_random_masks(b, MaskConfig{}, r1), m2 = apply_random_masks(b, MaskConfig{}, r2);
  CHECK(m1.decision.patches_dropped == m2.decision.patches_dropped);
  CHECK(m1.decision.fingers3d_dropped == m2.decision.fingers3d_dropped);
  if (m1.bundle.skel3d) CHECK(m1.bundle.skel3d->joints == m2.bundle.skel3d->joints);
}

TEST_CASE("apply_random_masks: modality drop rates over 1e5 draws") {
  const EncoderConfig c = small_encoder();
  Rng rng(9);
  const ConditionBundle b = full_bundle(rng, c);
  const MaskConfig cfg;  // defaults
  const int n = 100000;
  int img = 0, s2 = 0, s3 = 0;
  for (int i = 0; i < n; ++i) {
    const MaskedBundle m = apply_random_masks(b, cfg, rng);
    img += m.decision.image_dropped;
    s2 += m.decision.skel2d_dropped;
    s3 += m.decision.skel3d_dropped;
    REQUIRE(m.decision.image_dropped == !m.bundle.image.has_value());
  }
  const double p = cfg.p_all + (1 - cfg.p_all) * cfg.p_m;
  const double se = std::sqrt(p * (1 - p) / n);
  for (int k : {img, s2, s3}) CHECK(std::abs(static_cast<double>(k) / n - p) <= 3 * se);
}

TEST_CASE("apply_random_masks: finger groups, patch rates and flag preservation") {
  const EncoderConfig c = small_encoder();
  Rng rng(10);
  const ConditionBundle b = full_bundle(rng, c);
  MaskConfig cfg;
  cfg.p_all = 0;
  cfg.p_m = 0;
  cfg.p_skel = 0.5;
  const int n = 10000;
  std::array<int, kNumFingers> drops{};
  long patches = 0, patch_total = 0;
  for (int i = 0; i < n; ++i) {
    const MaskedBundle m = apply_random_masks(b, cfg, rng);
    const Vec& valid = m.bundle.skel3d->valid;
    const Vec& conf = m.bundle.skel2d->confidence;
    CHECK(valid(0) == 1.0);
    for (int f = 0; f < kNumFingers; ++f) {
      drops[f] += m.decision.fingers3d_dropped[f];
      for (int k = 0; k < 4; ++k) {
        REQUIRE(valid(finger_joint(f, k)) == (m.decision.fingers3d_dropped[f] ? 0.0 : 1.0));
        REQUIRE(conf(finger_joint(f, k)) == (m.decision.fingers2d_dropped[f] ? 0.0 : 1.0));
      }
    }
    for (char d : m.decision.patches_dropped) patches += d;
    patch_total += static_cast<long>(m.decision.patches_dropped.size());
  }
  const double se = std::sqrt(0.25 / n);
  for (int f = 0; f < kNumFingers; ++f) CHECK(std::abs(drops[f] / static_cast<double>(n) - 0.5) <= 3 * se);
  const double pse = std::sqrt(cfg.p_image * (1 - cfg.p_image) / patch_total);
  CHECK(std::abs(static_cast<double>(patches) / patch_total - cfg.p_image) <= 3 * pse);

  // Joint noise has the configured spread.
  MaskConfig noisy = cfg;
  noisy.p_skel = 0;
  double sum2 = 0;
  const int m = 2000;
  for (int i = 0; i < m; ++i) {
    const MaskedBundle mb = apply_random_masks(b, noisy, rng);
    sum2 += (mb.bundle.skel3d->joints - b.skel3d->joints).squaredNorm();
  }
  CHECK(std::sqrt(sum2 / (m * kNumJoints * 3)) == doctest::Approx(noisy.sigma_joint3d).epsilon(0.02));
}

TEST_CASE("bundle_from_sample and joint_finger") {
  HandSample s;
  Rng rng(11);
  s.joints2d = randn(rng, kNumJoints, 2);
  s.joints3d = randn(rng, kNumJoints, 3) * 10.0;
  s.confidence = Vec::Ones(kNumJoints);
  const EncoderConfig c = small_encoder();
  const ConditionBundle b = bundle_from_sample(s, c);
  CHECK_FALSE(b.image.has_value());
  CHECK(b.skel3d->joints.row(0).isZero());
  CHECK(b.skel3d->joints.row(5).isApprox(s.joints3d.row(5) - s.joints3d.row(0)));
  s.image = random_image(rng, 32);
  CHECK(bundle_from_sample(s, c).patch_mask.size() == static_cast<std::size_t>(c.patches()));
  CHECK(joint_finger(0) == -1);
  CHECK(joint_finger(1) == 0);
  CHECK(joint_finger(4) == 0);
  CHECK(joint_finger(5) == 1);
  CHECK(joint_finger(20) == 4);
}
