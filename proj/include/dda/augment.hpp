#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dda/image.hpp"
#include "dda/nn_ops.hpp"
#include "dda/rng.hpp"
#include "dda/tensor.hpp"

namespace dda {

// ---------------------------------------------------------------------------
// The searchable operation pool.
// ---------------------------------------------------------------------------

enum class AugOpKind : int {
  Identical = 0,
  Brightness,
  Contrast,
  Hue,
  Saturation,
  Solarize,
  GaussianBlur,
  Posterize,
  Gray,
  Sharpness,
};

constexpr int kNumAugOps = 10;

inline const char* aug_op_name(AugOpKind k) {
  static const std::array<const char*, kNumAugOps> names = {
      "Identical", "Brightness", "Contrast",  "Hue",  "Saturation",
      "Solarize",  "GaussianBlur", "Posterize", "Gray", "Sharpness"};
  return names[static_cast<size_t>(k)];
}

inline AugOpKind aug_op_from_name(const std::string& name) {
  for (int i = 0; i < kNumAugOps; ++i)
    if (name == aug_op_name(static_cast<AugOpKind>(i)))
      return static_cast<AugOpKind>(i);
  fail("unknown augmentation operation \"" + name + "\"");
}

struct MagnitudeSpec {
  AugOpKind kind;
  double low = 0.0;
  double high = 0.0;
  int parameter_count = 0;
};

inline MagnitudeSpec magnitude_spec(AugOpKind k) {
  switch (k) {
    case AugOpKind::Identical: return {k, 0.0, 0.0, 0};
    case AugOpKind::Brightness: return {k, 0.0, 1.0, 1};
    case AugOpKind::Contrast: return {k, 0.0, 1.0, 1};
    case AugOpKind::Hue: return {k, -M_PI, M_PI, 1};
    case AugOpKind::Saturation: return {k, 0.0, 2.0, 1};
    case AugOpKind::Solarize: return {k, 0.0, 1.0, 1};
    case AugOpKind::GaussianBlur:
      return {k, 0.0, std::numeric_limits<double>::infinity(), 1};
    case AugOpKind::Posterize: return {k, 0.0, 8.0, 1};
    case AugOpKind::Gray: return {k, 0.0, 0.0, 0};
    case AugOpKind::Sharpness: return {k, 0.0, 1.0, 1};
  }
  fail("bad op kind");
}

struct AugConfig {
  int64_t blur_kernel = 9;       // odd; 9 suits 32px inputs
  double solarize_band = 0.05;   // width of the smooth threshold transition
};

// ---------------------------------------------------------------------------
// Differentiable image operations. Inputs are NCHW in [0,1]; every op clamps
// its output back to [0,1] and is differentiable w.r.t. image and magnitude.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Tensor<T> channel(const Tensor<T>& x, int64_t c) {
  return index_select(x, 1, {c});
}

// Rec.601 luma, anchored on G so that a gray input returns its own value
// bit-for-bit.
template <typename T>
Tensor<T> luminance(const Tensor<T>& x) {
  Tensor<T> r = channel(x, 0), g = channel(x, 1), b = channel(x, 2);
  return g + 0.299 * (r - g) + 0.114 * (b - g);
}

template <typename T>
Tensor<T> exp2t(const Tensor<T>& x) {
  return ew_unary<T>(
      "exp2", x, [](T v) { return std::exp2(v); },
      [](T g, T, T y) { return g * y * T(M_LN2); });
}

// RGB -> YIQ chroma plane and its exact double-precision inverse.
struct YiqMats {
  double fwd[3][3];
  double inv[3][3];
};

inline const YiqMats& yiq_mats() {
  static const YiqMats m = [] {
    YiqMats r{{{0.299, 0.587, 0.114},
               {0.595716, -0.274453, -0.321263},
               {0.211456, -0.522591, 0.311135}},
              {}};
    // 3x3 inverse via cofactors
    const auto& a = r.fwd;
    double det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) -
                 a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0]) +
                 a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    r.inv[0][0] = (a[1][1] * a[2][2] - a[1][2] * a[2][1]) / det;
    r.inv[0][1] = (a[0][2] * a[2][1] - a[0][1] * a[2][2]) / det;
    r.inv[0][2] = (a[0][1] * a[1][2] - a[0][2] * a[1][1]) / det;
    r.inv[1][0] = (a[1][2] * a[2][0] - a[1][0] * a[2][2]) / det;
    r.inv[1][1] = (a[0][0] * a[2][2] - a[0][2] * a[2][0]) / det;
    r.inv[1][2] = (a[0][2] * a[1][0] - a[0][0] * a[1][2]) / det;
    r.inv[2][0] = (a[1][0] * a[2][1] - a[1][1] * a[2][0]) / det;
    r.inv[2][1] = (a[0][1] * a[2][0] - a[0][0] * a[2][1]) / det;
    r.inv[2][2] = (a[0][0] * a[1][1] - a[0][1] * a[1][0]) / det;
    return r;
  }();
  return m;
}

template <typename T>
Tensor<T> depthwise_weight(const Tensor<T>& taps, int64_t channels, int64_t kh,
                           int64_t kw) {
  Tensor<T> one = reshape(taps, Shape{1, 1, kh, kw});
  std::vector<Tensor<T>> copies(static_cast<size_t>(channels), one);
  return concat(copies, 0);
}

// Separable Gaussian blur with replicate padding; sigma is a scalar tensor.
template <typename T>
Tensor<T> gaussian_blur_op(const Tensor<T>& x, const Tensor<T>& sigma,
                           const AugConfig& cfg) {
  const int64_t C = x.dim(1);
  const int64_t K = cfg.blur_kernel;
  const int64_t c2 = K / 2;
  std::vector<T> offs(static_cast<size_t>(K));
  for (int64_t i = 0; i < K; ++i) offs[static_cast<size_t>(i)] = static_cast<T>(i - c2);
  Tensor<T> off(Shape{K}, std::move(offs));
  Tensor<T> sig = sigma + 1e-3;  // keeps the kernel well-defined at sigma 0
  Tensor<T> denom = 2.0 * sig * sig;
  Tensor<T> e = exp(neg(divide(mul(off, off), denom)));
  Tensor<T> taps = divide(e, sum(e, {0}, true));
  Tensor<T> wx = depthwise_weight(taps, C, 1, K);
  Tensor<T> wy = depthwise_weight(taps, C, K, 1);
  Tensor<T> out = pad2d_replicate(x, 0, 0, c2, c2);
  out = conv2d(out, wx, 1, 0, C);
  out = pad2d_replicate(out, c2, c2, 0, 0);
  out = conv2d(out, wy, 1, 0, C);
  return out;
}

// 3x3 smoothing kernel used by the sharpness op.
template <typename T>
Tensor<T> smooth3x3(const Tensor<T>& x) {
  const int64_t C = x.dim(1);
  const T w1 = T(1) / T(13), w5 = T(5) / T(13);
  Tensor<T> taps(Shape{3, 3}, {w1, w1, w1, w1, w5, w1, w1, w1, w1});
  Tensor<T> wk = depthwise_weight(taps, C, 3, 3);
  return conv2d(pad2d_replicate(x, 1, 1, 1, 1), wk, 1, 0, C);
}

}  // namespace detail

// Applies one operation of the pool. `magnitude` is a scalar tensor in the
// operation's range (callers map raw parameters first).
template <typename T>
Tensor<T> apply_aug(const Tensor<T>& images, AugOpKind kind,
                    const Tensor<T>& magnitude, const AugConfig& cfg = {}) {
  require(images.ndim() == 4, "apply_aug: expected NCHW images, got " +
                                  shape_str(images.shape()));
  const int64_t C = images.dim(1);
  require(C == 3 || C == 1, "apply_aug: expected 1 or 3 channels, got " +
                                std::to_string(C));
  const MagnitudeSpec spec = magnitude_spec(kind);
  if (spec.parameter_count == 1) {
    require(magnitude.size() == 1, "apply_aug: magnitude must be scalar");
    const double v = static_cast<double>(magnitude[0]);
    require(v >= spec.low - 1e-9 && v <= spec.high + 1e-9,
            std::string("apply_aug(") + aug_op_name(kind) + "): magnitude " +
                std::to_string(v) + " outside [" + std::to_string(spec.low) + "," +
                std::to_string(spec.high) + "]");
  }
  // color ops degrade to identity on single-channel input
  if (C == 1 && (kind == AugOpKind::Hue || kind == AugOpKind::Saturation ||
                 kind == AugOpKind::Gray))
    return images;

  switch (kind) {
    case AugOpKind::Identical:
      return images;
    case AugOpKind::Brightness:
      // 0 leaves the image; 1 gives the white image
      return clamp(mul(images, 1.0 - magnitude) + magnitude, T(0), T(1));
    case AugOpKind::Contrast:
      // 0 gives black; 1 leaves the image
      return clamp(mul(images, magnitude), T(0), T(1));
    case AugOpKind::Hue: {
      const auto& M = detail::yiq_mats();
      Tensor<T> r = detail::channel(images, 0), g = detail::channel(images, 1),
                b = detail::channel(images, 2);
      Tensor<T> y = M.fwd[0][0] * r + M.fwd[0][1] * g + M.fwd[0][2] * b;
      Tensor<T> i = M.fwd[1][0] * r + M.fwd[1][1] * g + M.fwd[1][2] * b;
      Tensor<T> q = M.fwd[2][0] * r + M.fwd[2][1] * g + M.fwd[2][2] * b;
      Tensor<T> cth = cos(magnitude), sth = sin(magnitude);
      Tensor<T> i2 = mul(i, cth) - mul(q, sth);
      Tensor<T> q2 = mul(i, sth) + mul(q, cth);
      Tensor<T> r2 = y * M.inv[0][0] + i2 * M.inv[0][1] + q2 * M.inv[0][2];
      Tensor<T> g2 = y * M.inv[1][0] + i2 * M.inv[1][1] + q2 * M.inv[1][2];
      Tensor<T> b2 = y * M.inv[2][0] + i2 * M.inv[2][1] + q2 * M.inv[2][2];
      return clamp(concat<T>({r2, g2, b2}, 1), T(0), T(1));
    }
    case AugOpKind::Saturation: {
      // 0 gives grayscale; 1 leaves the image; 2 doubles the chroma
      Tensor<T> lum = detail::luminance(images);
      return clamp(mul(images, magnitude) + mul(lum, 1.0 - magnitude), T(0), T(1));
    }
    case AugOpKind::Solarize: {
      // invert above the threshold, with a narrow smooth transition band
      Tensor<T> u = (images - magnitude) / cfg.solarize_band;
      Tensor<T> tband = clamp(u, T(0), T(1));
      Tensor<T> mask = tband * tband * (3.0 - 2.0 * tband);
      return clamp(mul(images, 1.0 - mask) + mul(1.0 - images, mask), T(0), T(1));
    }
    case AugOpKind::GaussianBlur:
      return clamp(detail::gaussian_blur_op(images, magnitude, cfg), T(0), T(1));
    case AugOpKind::Posterize: {
      // smooth staircase quantizer to 2^bits levels
      Tensor<T> scale = detail::exp2t(magnitude) - 1.0;
      Tensor<T> safe = clamp_min(scale, T(1e-3));
      Tensor<T> u = mul(images, scale);
      Tensor<T> r = u - sin(u * (2.0 * M_PI)) * (1.0 / (2.0 * M_PI));
      return clamp(divide(r, safe), T(0), T(1));
    }
    case AugOpKind::Gray: {
      Tensor<T> lum = detail::luminance(images);
      return clamp(concat<T>({lum, lum, lum}, 1), T(0), T(1));
    }
    case AugOpKind::Sharpness: {
      // 0 leaves the image; 1 gives the unsharp-masked image
      Tensor<T> smooth = detail::smooth3x3(images);
      return clamp(images + mul(images - smooth, magnitude), T(0), T(1));
    }
  }
  fail("bad op kind");
}

// ---------------------------------------------------------------------------
// Learnable policy parameters (search space).
// ---------------------------------------------------------------------------

template <typename T>
struct PolicyParams {
  int64_t n_subpolicies = 5;
  double temperature = 0.1;
  Tensor<T> logits;          // [N, K]
  Tensor<T> raw_magnitudes;  // [N, K], unconstrained
};

template <typename T>
PolicyParams<T> make_policy_params(int64_t n_subpolicies = 5,
                                   double temperature = 0.1) {
  PolicyParams<T> p;
  p.n_subpolicies = n_subpolicies;
  p.temperature = temperature;
  p.logits = Tensor<T>(Shape{n_subpolicies, kNumAugOps});
  p.raw_magnitudes = Tensor<T>(Shape{n_subpolicies, kNumAugOps});
  return p;
}

inline double map_magnitude_value(AugOpKind kind, double raw) {
  const MagnitudeSpec spec = magnitude_spec(kind);
  if (spec.parameter_count == 0) return 0.0;
  if (kind == AugOpKind::GaussianBlur)
    return 2.0 * (std::max(raw, 0.0) + std::log1p(std::exp(-std::abs(raw))));
  const double s = raw >= 0 ? 1.0 / (1.0 + std::exp(-raw))
                            : std::exp(raw) / (1.0 + std::exp(raw));
  return spec.low + (spec.high - spec.low) * s;
}

// Maps one raw magnitude (scalar tensor) into the op's range.
template <typename T>
Tensor<T> map_magnitude(AugOpKind kind, const Tensor<T>& raw) {
  const MagnitudeSpec spec = magnitude_spec(kind);
  if (spec.parameter_count == 0) return Tensor<T>::scalar(T(0));
  if (kind == AugOpKind::GaussianBlur) return 2.0 * softplus(raw);
  return spec.low + (spec.high - spec.low) * sigmoid(raw);
}

// Search-mode sub-policy: the softmax-weighted blend over all K operations.
template <typename T>
Tensor<T> subpolicy_forward(const Tensor<T>& images, const Tensor<T>& logits_row,
                            const Tensor<T>& raw_magnitudes_row, double temperature,
                            const AugConfig& cfg = {}, int64_t index = -1) {
  require(logits_row.size() == kNumAugOps && raw_magnitudes_row.size() == kNumAugOps,
          "subpolicy_forward: expected " + std::to_string(kNumAugOps) + " logits");
  require(temperature > 0, "subpolicy_forward: temperature must be positive");
  for (int64_t i = 0; i < logits_row.size(); ++i)
    require(std::isfinite(static_cast<double>(logits_row[i])),
            "subpolicy_forward: NaN logit in sub-policy " + std::to_string(index));
  Tensor<T> flat = reshape(logits_row, Shape{kNumAugOps});
  Tensor<T> weights = softmax(flat * (1.0 / temperature), 0);
  Tensor<T> rawf = reshape(raw_magnitudes_row, Shape{kNumAugOps});
  Tensor<T> out;
  for (int64_t k = 0; k < kNumAugOps; ++k) {
    const auto kind = static_cast<AugOpKind>(k);
    Tensor<T> wk = index_select(weights, 0, {k});
    Tensor<T> mk = map_magnitude(kind, index_select(rawf, 0, {k}));
    Tensor<T> term = mul(apply_aug(images, kind, mk, cfg), wk);
    out = k == 0 ? term : out + term;
  }
  return clamp(out, T(0), T(1));
}

// Full policy in search mode: sequential composition of sub-policy blends.
template <typename T>
Tensor<T> policy_forward_search(const Tensor<T>& images, const PolicyParams<T>& params,
                                const AugConfig& cfg = {}) {
  Tensor<T> x = images;
  for (int64_t n = 0; n < params.n_subpolicies; ++n) {
    Tensor<T> lrow = index_select(params.logits, 0, {n});
    Tensor<T> mrow = index_select(params.raw_magnitudes, 0, {n});
    x = subpolicy_forward(x, lrow, mrow, params.temperature, cfg, n);
  }
  return x;
}

// ---------------------------------------------------------------------------
// Deployed (frozen) policies.
// ---------------------------------------------------------------------------

struct DeployedOp {
  AugOpKind kind = AugOpKind::Identical;
  double prob = 0.0;
  double magnitude = 0.0;
  std::optional<double> magnitude_high;  // interval semantics (e.g. blur sigma)
};

struct DeployedSubPolicy {
  std::vector<DeployedOp> ops;
};

enum class SamplingMode { Categorical, Argmax };

inline const char* sampling_mode_name(SamplingMode m) {
  return m == SamplingMode::Categorical ? "categorical" : "argmax";
}

struct DeployedPolicy {
  int version = 1;
  SamplingMode mode = SamplingMode::Categorical;
  std::vector<DeployedSubPolicy> subpolicies;
};

inline nlohmann::ordered_json policy_to_json(const DeployedPolicy& p) {
  nlohmann::ordered_json j;
  j["version"] = p.version;
  j["mode"] = sampling_mode_name(p.mode);
  j["subpolicies"] = nlohmann::ordered_json::array();
  for (const auto& sp : p.subpolicies) {
    nlohmann::ordered_json js;
    js["ops"] = nlohmann::ordered_json::array();
    for (const auto& op : sp.ops) {
      nlohmann::ordered_json jo;
      jo["kind"] = aug_op_name(op.kind);
      jo["prob"] = op.prob;
      if (magnitude_spec(op.kind).parameter_count > 0) {
        jo["magnitude"] = op.magnitude;
        if (op.magnitude_high) jo["magnitude_high"] = *op.magnitude_high;
      }
      js["ops"].push_back(std::move(jo));
    }
    j["subpolicies"].push_back(std::move(js));
  }
  return j;
}

inline std::string policy_to_json_string(const DeployedPolicy& p) {
  return policy_to_json(p).dump();
}

inline DeployedPolicy policy_from_json(const nlohmann::json& j) {
  DeployedPolicy p;
  require(j.contains("version") && j["version"].is_number_integer(),
          "policy: missing integer \"version\"");
  p.version = j["version"].get<int>();
  require(p.version == 1, "policy: unsupported version " + std::to_string(p.version));
  const std::string mode = j.value("mode", "");
  if (mode == "categorical") p.mode = SamplingMode::Categorical;
  else if (mode == "argmax") p.mode = SamplingMode::Argmax;
  else fail("policy: mode must be \"categorical\" or \"argmax\", got \"" + mode + "\"");
  require(j.contains("subpolicies") && j["subpolicies"].is_array(),
          "policy: missing \"subpolicies\" array");
  for (const auto& js : j["subpolicies"]) {
    DeployedSubPolicy sp;
    require(js.contains("ops") && js["ops"].is_array(), "policy: sub-policy missing \"ops\"");
    double total = 0.0;
    for (const auto& jo : js["ops"]) {
      DeployedOp op;
      op.kind = aug_op_from_name(jo.at("kind").get<std::string>());
      op.prob = jo.at("prob").get<double>();
      require(op.prob >= 0.0 && op.prob <= 1.0 + 1e-6,
              "policy: probability out of range for " + std::string(aug_op_name(op.kind)));
      total += op.prob;
      const MagnitudeSpec spec = magnitude_spec(op.kind);
      if (spec.parameter_count > 0) {
        op.magnitude = jo.at("magnitude").get<double>();
        require(op.magnitude >= spec.low - 1e-9 && op.magnitude <= spec.high + 1e-9,
                "policy: magnitude out of range for " + std::string(aug_op_name(op.kind)));
        if (jo.contains("magnitude_high")) {
          op.magnitude_high = jo["magnitude_high"].get<double>();
          require(*op.magnitude_high >= op.magnitude - 1e-9,
                  "policy: magnitude_high below magnitude");
        }
      }
      sp.ops.push_back(op);
    }
    // Published tables round percentages, so the sum may fall a little
    // short of 1; sampling renormalizes.
    require(total <= 1.0 + 1e-6 && total > 0.0, "policy: sub-policy probabilities sum to " +
                                                    std::to_string(total));
    p.subpolicies.push_back(std::move(sp));
  }
  return p;
}

inline DeployedPolicy policy_from_json_string(const std::string& s) {
  return policy_from_json(nlohmann::json::parse(s));
}

// Freezes learned parameters into a deployable policy.
template <typename T>
DeployedPolicy finalize_policy(const PolicyParams<T>& params, SamplingMode mode) {
  DeployedPolicy p;
  p.mode = mode;
  for (int64_t n = 0; n < params.n_subpolicies; ++n) {
    // softmax over the row, in double
    std::vector<double> logit(kNumAugOps);
    double mx = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < kNumAugOps; ++k) {
      logit[static_cast<size_t>(k)] =
          static_cast<double>(params.logits[n * kNumAugOps + k]) / params.temperature;
      mx = std::max(mx, logit[static_cast<size_t>(k)]);
    }
    double s = 0.0;
    for (auto& v : logit) {
      v = std::exp(v - mx);
      s += v;
    }
    for (auto& v : logit) v /= s;
    DeployedSubPolicy sp;
    if (mode == SamplingMode::Argmax) {
      int best = 0;  // ties break toward the lowest op index
      for (int k = 1; k < kNumAugOps; ++k)
        if (logit[static_cast<size_t>(k)] > logit[static_cast<size_t>(best)]) best = k;
      DeployedOp op;
      op.kind = static_cast<AugOpKind>(best);
      op.prob = 1.0;
      op.magnitude = map_magnitude_value(
          op.kind, static_cast<double>(params.raw_magnitudes[n * kNumAugOps + best]));
      sp.ops.push_back(op);
    } else {
      for (int k = 0; k < kNumAugOps; ++k) {
        DeployedOp op;
        op.kind = static_cast<AugOpKind>(k);
        op.prob = logit[static_cast<size_t>(k)];
        op.magnitude = map_magnitude_value(
            op.kind, static_cast<double>(params.raw_magnitudes[n * kNumAugOps + k]));
        sp.ops.push_back(op);
      }
    }
    p.subpolicies.push_back(std::move(sp));
  }
  return p;
}

namespace detail {

// Categorical draw over the stored probabilities, renormalized so that
// rounded tables under 1.0 remain usable. Single-op sub-policies skip the
// draw entirely.
inline const DeployedOp& draw_op(const DeployedSubPolicy& sp, Rng& rng) {
  require(!sp.ops.empty(), "apply_deployed: empty sub-policy");
  if (sp.ops.size() == 1) return sp.ops[0];
  double total = 0.0;
  for (const auto& op : sp.ops) total += op.prob;
  const double u = rng.uniform() * total;
  double acc = 0.0;
  for (size_t i = 0; i + 1 < sp.ops.size(); ++i) {
    acc += sp.ops[i].prob;
    if (u < acc) return sp.ops[i];
  }
  return sp.ops.back();
}

inline double draw_magnitude(const DeployedOp& op, Rng& rng) {
  if (op.magnitude_high && *op.magnitude_high > op.magnitude)
    return rng.uniform(op.magnitude, *op.magnitude_high);
  return op.magnitude;
}

}  // namespace detail

// Applies a deployed policy to one image: per sub-policy, draw an operation
// from the stored categorical (renormalized) and apply its magnitude.
inline Image apply_deployed_image(const Image& im, const DeployedPolicy& policy,
                                  Rng& rng, const AugConfig& cfg = {}) {
  std::vector<const Image*> one{&im};
  Tensor<float> x = stack_images<float>(one);
  for (const auto& sp : policy.subpolicies) {
    const DeployedOp& op = detail::draw_op(sp, rng);
    const double mag = detail::draw_magnitude(op, rng);
    x = apply_aug(x, op.kind, Tensor<float>::scalar(static_cast<float>(mag)), cfg);
  }
  Image out = tensor_to_image(x, 0);
  out.id = im.id;
  out.label = im.label;
  return out;
}

template <typename T>
Tensor<T> apply_deployed(const Tensor<T>& images, const DeployedPolicy& policy,
                         Rng& rng, const AugConfig& cfg = {}) {
  require(images.ndim() == 4, "apply_deployed: expected NCHW");
  std::vector<Tensor<T>> outs;
  const int64_t N = images.dim(0);
  for (int64_t n = 0; n < N; ++n) {
    Tensor<T> x = index_select(stop_grad(images), 0, {n});
    for (const auto& sp : policy.subpolicies) {
      const DeployedOp& op = detail::draw_op(sp, rng);
      const double mag = detail::draw_magnitude(op, rng);
      x = apply_aug(x, op.kind, Tensor<T>::scalar(static_cast<T>(mag)), cfg);
    }
    outs.push_back(x);
  }
  return concat(outs, 0);
}

// Human-readable table in the shape used by policy reports: one row per
// sub-policy, operations sorted by probability, percentages at two decimals.
inline std::string render_policy_table(const DeployedPolicy& policy) {
  std::ostringstream os;
  os << "Sampling: " << sampling_mode_name(policy.mode) << "\n";
  for (size_t n = 0; n < policy.subpolicies.size(); ++n) {
    std::vector<const DeployedOp*> ops;
    for (const auto& op : policy.subpolicies[n].ops) ops.push_back(&op);
    std::stable_sort(ops.begin(), ops.end(),
                     [](const DeployedOp* a, const DeployedOp* b) { return a->prob > b->prob; });
    std::string names, mags;
    for (const auto* op : ops) {
      const long pct = std::lround(op->prob * 100.0);
      if (pct < 1 && !names.empty()) continue;
      if (!names.empty()) {
        names += ", ";
        mags += ", ";
      }
      char buf[64];
      std::snprintf(buf, sizeof buf, "%s (%ld%%)", aug_op_name(op->kind), pct);
      names += buf;
      if (magnitude_spec(op->kind).parameter_count == 0) {
        mags += "N/A";
      } else if (op->magnitude_high) {
        std::snprintf(buf, sizeof buf, "[%.2f, %.2f]", op->magnitude, *op->magnitude_high);
        mags += buf;
      } else {
        std::snprintf(buf, sizeof buf, "%.2f", op->magnitude);
        mags += buf;
      }
    }
    os << "Operation No." << (n + 1) << " | " << names << " | " << mags << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Base augmentation: random resized crop + horizontal flip.
// ---------------------------------------------------------------------------

struct BaseAugConfig {
  int64_t target_h = 32, target_w = 32;
  double scale_lo = 0.2, scale_hi = 1.0;  // area fraction of the source
  double flip_prob = 0.5;
};

inline Image base_augment_view(const Image& src0, Rng& rng, const BaseAugConfig& cfg) {
  Image src = src0;
  // degenerate tiny inputs are upscaled first
  if (src.h < 2 || src.w < 2)
    src = resize_bilinear(src, std::max<int64_t>(src.h, 2), std::max<int64_t>(src.w, 2));
  const double scale = rng.uniform(cfg.scale_lo, cfg.scale_hi);
  const int64_t max_side = std::min(src.h, src.w);
  int64_t side = static_cast<int64_t>(std::lround(std::sqrt(scale) * static_cast<double>(max_side)));
  side = std::clamp<int64_t>(side, 1, max_side);
  const int64_t top = src.h - side > 0 ? rng.below(src.h - side + 1) : 0;
  const int64_t left = src.w - side > 0 ? rng.below(src.w - side + 1) : 0;
  Image view = resize_bilinear(crop(src, top, left, side, side), cfg.target_h, cfg.target_w);
  if (rng.bernoulli(cfg.flip_prob)) flip_horizontal(view);
  return view;
}

inline std::pair<Image, Image> base_augment(const Image& src, Rng& rng,
                                            const BaseAugConfig& cfg = {}) {
  Image v1 = base_augment_view(src, rng, cfg);
  Image v2 = base_augment_view(src, rng, cfg);
  return {std::move(v1), std::move(v2)};
}

}  // namespace dda
