#include "padtrack/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <exception>
#include <fstream>
#include <limits>
#include <sstream>

#include "padtrack/common.hpp"
#include "padtrack/parallel.hpp"

namespace padtrack {

namespace {

constexpr int kDModel = 64;
constexpr int kHeads = 2;
constexpr int kHeadDim = kDModel / kHeads;
constexpr int kMlpHidden = 128;
constexpr int kTimeFeats = 16;
constexpr double kLnEps = 1e-5;
constexpr int kConvC[4] = {3, 8, 16, 32};

// y[T x out] = x[T x in] * W + b, W stored input-major. Scalar-templated so
// the extended-precision check path shares the exact computation order.
template <typename S>
void linear_fwd(const S* x, int T, int in, int out, const double* W, const double* b, S* y) {
  for (int r = 0; r < T; ++r) {
    const S* xr = x + static_cast<std::ptrdiff_t>(r) * in;
    S* yr = y + static_cast<std::ptrdiff_t>(r) * out;
    for (int o = 0; o < out; ++o) yr[o] = b[o];
    for (int i = 0; i < in; ++i) {
      const S xi = xr[i];
      const double* wrow = W + static_cast<std::ptrdiff_t>(i) * out;
      for (int o = 0; o < out; ++o) yr[o] += xi * wrow[o];
    }
  }
}

// Accumulates dW, db, and (when gx is non-null) the input gradient.
void linear_bwd(const double* x, const double* gy, int T, int in, int out, const double* W,
                double* gW, double* gb, double* gx) {
  for (int r = 0; r < T; ++r) {
    const double* xr = x + static_cast<std::ptrdiff_t>(r) * in;
    const double* gyr = gy + static_cast<std::ptrdiff_t>(r) * out;
    for (int o = 0; o < out; ++o) gb[o] += gyr[o];
    for (int i = 0; i < in; ++i) {
      const double xi = xr[i];
      double* gwrow = gW + static_cast<std::ptrdiff_t>(i) * out;
      const double* wrow = W + static_cast<std::ptrdiff_t>(i) * out;
      double acc = 0.0;
      for (int o = 0; o < out; ++o) {
        gwrow[o] += xi * gyr[o];
        acc += wrow[o] * gyr[o];
      }
      if (gx) gx[static_cast<std::ptrdiff_t>(r) * in + i] += acc;
    }
  }
}

template <typename S>
void layernorm_fwd(const S* x, int T, int n, const double* gamma, const double* beta, S* y,
                   S* xhat, S* invstd) {
  for (int r = 0; r < T; ++r) {
    const S* xr = x + static_cast<std::ptrdiff_t>(r) * n;
    S mu = 0.0;
    for (int i = 0; i < n; ++i) mu += xr[i];
    mu /= n;
    S var = 0.0;
    for (int i = 0; i < n; ++i) {
      const S d = xr[i] - mu;
      var += d * d;
    }
    var /= n;
    const S inv = S(1) / std::sqrt(var + S(kLnEps));
    invstd[r] = inv;
    for (int i = 0; i < n; ++i) {
      const S xh = (xr[i] - mu) * inv;
      xhat[static_cast<std::ptrdiff_t>(r) * n + i] = xh;
      y[static_cast<std::ptrdiff_t>(r) * n + i] = gamma[i] * xh + beta[i];
    }
  }
}

void layernorm_bwd(const double* xhat, const double* invstd, const double* gamma,
                   const double* gy, int T, int n, double* ggamma, double* gbeta, double* gx) {
  for (int r = 0; r < T; ++r) {
    const double* xh = xhat + static_cast<std::ptrdiff_t>(r) * n;
    const double* gyr = gy + static_cast<std::ptrdiff_t>(r) * n;
    double mean_gh = 0.0, mean_ghx = 0.0;
    for (int i = 0; i < n; ++i) {
      const double gh = gyr[i] * gamma[i];
      mean_gh += gh;
      mean_ghx += gh * xh[i];
      ggamma[i] += gyr[i] * xh[i];
      gbeta[i] += gyr[i];
    }
    mean_gh /= n;
    mean_ghx /= n;
    const double inv = invstd[r];
    for (int i = 0; i < n; ++i) {
      const double gh = gyr[i] * gamma[i];
      gx[static_cast<std::ptrdiff_t>(r) * n + i] += inv * (gh - mean_gh - xh[i] * mean_ghx);
    }
  }
}

// 3x3 stride-2 pad-1 convolution with ReLU; planes are [channel][y][x].
template <typename S>
void conv_relu_fwd(const S* in, int ci, int Sz, const double* W, const double* b, int co,
                   S* out) {
  const int O = Sz / 2;
  for (int oc = 0; oc < co; ++oc) {
    const double* wbase = W + static_cast<std::ptrdiff_t>(oc) * ci * 9;
    for (int y = 0; y < O; ++y) {
      for (int x = 0; x < O; ++x) {
        S acc = b[oc];
        for (int ic = 0; ic < ci; ++ic) {
          const S* plane = in + static_cast<std::ptrdiff_t>(ic) * Sz * Sz;
          const double* w = wbase + ic * 9;
          for (int ky = 0; ky < 3; ++ky) {
            const int iy = 2 * y - 1 + ky;
            if (iy < 0 || iy >= Sz) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int ix = 2 * x - 1 + kx;
              if (ix < 0 || ix >= Sz) continue;
              acc += w[ky * 3 + kx] * plane[iy * Sz + ix];
            }
          }
        }
        out[(static_cast<std::ptrdiff_t>(oc) * O + y) * O + x] = acc > S(0) ? acc : S(0);
      }
    }
  }
}

void conv_relu_bwd(const double* in, int ci, int S, const double* W, int co, const double* out,
                   const double* gout, double* gW, double* gb, double* gin) {
  const int O = S / 2;
  for (int oc = 0; oc < co; ++oc) {
    const double* wbase = W + static_cast<std::ptrdiff_t>(oc) * ci * 9;
    double* gwbase = gW + static_cast<std::ptrdiff_t>(oc) * ci * 9;
    for (int y = 0; y < O; ++y) {
      for (int x = 0; x < O; ++x) {
        const std::ptrdiff_t oi = (static_cast<std::ptrdiff_t>(oc) * O + y) * O + x;
        if (out[oi] <= 0.0) continue;
        const double g = gout[oi];
        gb[oc] += g;
        for (int ic = 0; ic < ci; ++ic) {
          const double* plane = in + static_cast<std::ptrdiff_t>(ic) * S * S;
          double* gplane = gin ? gin + static_cast<std::ptrdiff_t>(ic) * S * S : nullptr;
          const double* w = wbase + ic * 9;
          double* gw = gwbase + ic * 9;
          for (int ky = 0; ky < 3; ++ky) {
            const int iy = 2 * y - 1 + ky;
            if (iy < 0 || iy >= S) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int ix = 2 * x - 1 + kx;
              if (ix < 0 || ix >= S) continue;
              gw[ky * 3 + kx] += g * plane[iy * S + ix];
              if (gplane) gplane[iy * S + ix] += g * w[ky * 3 + kx];
            }
          }
        }
      }
    }
  }
}

struct AttnOffsets {
  int wq, bq, wk, bk, wv, bv, wo, bo;
};

// Multi-head attention: queries from q_in (Tq rows), keys/values from kv_in
// (Tk rows). Fills the tape buffers and adds the output projection to resid.
template <typename S>
void attention_fwd(const S* q_in, int Tq, const S* kv_in, int Tk, const double* th,
                   const AttnOffsets& off, S* q, S* k, S* v, S* soft, S* cat, S* resid) {
  linear_fwd(q_in, Tq, kDModel, kDModel, th + off.wq, th + off.bq, q);
  linear_fwd(kv_in, Tk, kDModel, kDModel, th + off.wk, th + off.bk, k);
  linear_fwd(kv_in, Tk, kDModel, kDModel, th + off.wv, th + off.bv, v);
  const S scale = S(1) / std::sqrt(S(kHeadDim));
  for (int h = 0; h < kHeads; ++h) {
    const int c0 = h * kHeadDim;
    for (int i = 0; i < Tq; ++i) {
      S* srow = soft + (static_cast<std::ptrdiff_t>(h) * Tq + i) * Tk;
      S mx = -std::numeric_limits<S>::infinity();
      for (int j = 0; j < Tk; ++j) {
        S dot = 0.0;
        const S* qi = q + static_cast<std::ptrdiff_t>(i) * kDModel + c0;
        const S* kj = k + static_cast<std::ptrdiff_t>(j) * kDModel + c0;
        for (int d = 0; d < kHeadDim; ++d) dot += qi[d] * kj[d];
        srow[j] = dot * scale;
        mx = std::max(mx, srow[j]);
      }
      S sum = 0.0;
      for (int j = 0; j < Tk; ++j) {
        srow[j] = std::exp(srow[j] - mx);
        sum += srow[j];
      }
      for (int j = 0; j < Tk; ++j) srow[j] /= sum;
      S* ci_ = cat + static_cast<std::ptrdiff_t>(i) * kDModel + c0;
      for (int d = 0; d < kHeadDim; ++d) {
        S acc = 0.0;
        for (int j = 0; j < Tk; ++j)
          acc += srow[j] * v[static_cast<std::ptrdiff_t>(j) * kDModel + c0 + d];
        ci_[d] = acc;
      }
    }
  }
  std::vector<S> proj(static_cast<std::size_t>(Tq) * kDModel);
  linear_fwd(cat, Tq, kDModel, kDModel, th + off.wo, th + off.bo, proj.data());
  for (std::size_t i = 0; i < proj.size(); ++i) resid[i] += proj[i];
}

// g_out is the gradient at the residual branch output; g_qin / g_kvin are
// accumulated (they may alias for self-attention).
void attention_bwd(const double* q_in, int Tq, const double* kv_in, int Tk, const double* th,
                   const AttnOffsets& off, const double* q, const double* k, const double* v,
                   const double* soft, const double* cat, const double* g_out, double* gth,
                   double* g_qin, double* g_kvin) {
  std::vector<double> g_cat(static_cast<std::size_t>(Tq) * kDModel, 0.0);
  linear_bwd(cat, g_out, Tq, kDModel, kDModel, th + off.wo, gth + off.wo, gth + off.bo,
             g_cat.data());
  std::vector<double> g_q(static_cast<std::size_t>(Tq) * kDModel, 0.0);
  std::vector<double> g_k(static_cast<std::size_t>(Tk) * kDModel, 0.0);
  std::vector<double> g_v(static_cast<std::size_t>(Tk) * kDModel, 0.0);
  const double scale = 1.0 / std::sqrt(static_cast<double>(kHeadDim));
  std::vector<double> gA(Tk);
  for (int h = 0; h < kHeads; ++h) {
    const int c0 = h * kHeadDim;
    for (int i = 0; i < Tq; ++i) {
      const double* srow = soft + (static_cast<std::ptrdiff_t>(h) * Tq + i) * Tk;
      const double* gci = g_cat.data() + static_cast<std::ptrdiff_t>(i) * kDModel + c0;
      double dot_ga_a = 0.0;
      for (int j = 0; j < Tk; ++j) {
        const double* vj = v + static_cast<std::ptrdiff_t>(j) * kDModel + c0;
        double d2 = 0.0;
        for (int d = 0; d < kHeadDim; ++d) d2 += gci[d] * vj[d];
        gA[j] = d2;
        dot_ga_a += d2 * srow[j];
      }
      for (int j = 0; j < Tk; ++j) {
        const double gS = srow[j] * (gA[j] - dot_ga_a);
        const double* kj = k + static_cast<std::ptrdiff_t>(j) * kDModel + c0;
        const double* qi = q + static_cast<std::ptrdiff_t>(i) * kDModel + c0;
        double* gqi = g_q.data() + static_cast<std::ptrdiff_t>(i) * kDModel + c0;
        double* gkj = g_k.data() + static_cast<std::ptrdiff_t>(j) * kDModel + c0;
        double* gvj = g_v.data() + static_cast<std::ptrdiff_t>(j) * kDModel + c0;
        for (int d = 0; d < kHeadDim; ++d) {
          gqi[d] += gS * scale * kj[d];
          gkj[d] += gS * scale * qi[d];
          gvj[d] += srow[j] * gci[d];
        }
      }
    }
  }
  linear_bwd(q_in, g_q.data(), Tq, kDModel, kDModel, th + off.wq, gth + off.wq, gth + off.bq,
             g_qin);
  linear_bwd(kv_in, g_k.data(), Tk, kDModel, kDModel, th + off.wk, gth + off.wk, gth + off.bk,
             g_kvin);
  linear_bwd(kv_in, g_v.data(), Tk, kDModel, kDModel, th + off.wv, gth + off.wv, gth + off.bv,
             g_kvin);
}

struct BlockOffsets {
  int ln1_g, ln1_b;
  AttnOffsets self;
  int ln2_g, ln2_b;
  AttnOffsets cross;
  int ln3_g, ln3_b;
  int m1, mb1, m2, mb2;
};

struct Shape {
  int H, D, S, n_obs, in_dim;
  int conv_w[3], conv_b[3];
  int obs_proj_w, obs_proj_b, obs_pos;
  int act_in_w, act_in_b, act_pos;
  BlockOffsets blk[2];
  int lnf_g, lnf_b;
  int head_w, head_b;
  int total;
};

Shape make_shape(int H, int D, int S) {
  Shape s{};
  s.H = H;
  s.D = D;
  s.S = S;
  s.n_obs = (S / 8) * (S / 8);
  s.in_dim = D + kTimeFeats;
  int off = 0;
  auto seg = [&off](int n) {
    const int at = off;
    off += n;
    return at;
  };
  auto attn = [&seg]() {
    AttnOffsets a{};
    a.wq = seg(kDModel * kDModel);
    a.bq = seg(kDModel);
    a.wk = seg(kDModel * kDModel);
    a.bk = seg(kDModel);
    a.wv = seg(kDModel * kDModel);
    a.bv = seg(kDModel);
    a.wo = seg(kDModel * kDModel);
    a.bo = seg(kDModel);
    return a;
  };
  for (int l = 0; l < 3; ++l) {
    s.conv_w[l] = seg(kConvC[l + 1] * kConvC[l] * 9);
    s.conv_b[l] = seg(kConvC[l + 1]);
  }
  s.obs_proj_w = seg(kConvC[3] * kDModel);
  s.obs_proj_b = seg(kDModel);
  s.obs_pos = seg(s.n_obs * kDModel);
  s.act_in_w = seg(s.in_dim * kDModel);
  s.act_in_b = seg(kDModel);
  s.act_pos = seg(H * kDModel);
  for (auto& b : s.blk) {
    b.ln1_g = seg(kDModel);
    b.ln1_b = seg(kDModel);
    b.self = attn();
    b.ln2_g = seg(kDModel);
    b.ln2_b = seg(kDModel);
    b.cross = attn();
    b.ln3_g = seg(kDModel);
    b.ln3_b = seg(kDModel);
    b.m1 = seg(kDModel * kMlpHidden);
    b.mb1 = seg(kMlpHidden);
    b.m2 = seg(kMlpHidden * kDModel);
    b.mb2 = seg(kDModel);
  }
  s.lnf_g = seg(kDModel);
  s.lnf_b = seg(kDModel);
  s.head_w = seg(kDModel * D);
  s.head_b = seg(D);
  s.total = off;
  return s;
}

template <typename S>
void time_features(S t, S* out) {
  S omega = 1.0;
  for (int j = 0; j < kTimeFeats / 2; ++j) {
    out[2 * j] = std::sin(omega * t);
    out[2 * j + 1] = std::cos(omega * t);
    omega *= S(2);
  }
}

struct AttentionTape final : VelocityModel::Tape {
  std::vector<double> x0, c1, c2, c3, tok_in, E;
  std::vector<double> u, X0;
  struct Block {
    std::vector<double> x_in;
    std::vector<double> ln1_out, ln1_xhat, ln1_inv;
    std::vector<double> q, k, v, soft, cat;
    std::vector<double> x_self;
    std::vector<double> ln2_out, ln2_xhat, ln2_inv;
    std::vector<double> cq, ck, cv, csoft, ccat;
    std::vector<double> x_cross;
    std::vector<double> ln3_out, ln3_xhat, ln3_inv;
    std::vector<double> h1;
    std::vector<double> x_out;
  } b[2];
  std::vector<double> lnf_out, lnf_xhat, lnf_inv;
};

struct LinearTape final : VelocityModel::Tape {
  std::vector<double> a_t;
  double t = 0.0;
  double mean_pixel = 0.0;
};

double mean_pixel_value(const ImageU8& obs) {
  const std::ptrdiff_t n =
      static_cast<std::ptrdiff_t>(obs.width()) * obs.height() * obs.channels();
  if (n == 0) return 0.0;
  double sum = 0.0;
  for (int y = 0; y < obs.height(); ++y)
    for (int x = 0; x < obs.width(); ++x)
      for (int c = 0; c < obs.channels(); ++c) sum += obs.at(x, y, c);
  return sum / (255.0 * static_cast<double>(n));
}

}  // namespace

// ---------------------------------------------------------------- configs

bool AugmentConfig::is_identity() const {
  return brightness == 0.0 && contrast == 0.0 && saturation == 0.0 && hue == 0.0 &&
         rotation_deg == 0.0 && crop_fraction == 1.0;
}

void AugmentConfig::validate() const {
  auto range01 = [](double v, const char* name) {
    if (!(v >= 0.0 && v < 1.0))
      throw ConfigError(std::string("augment ") + name + " must be in [0, 1)");
  };
  range01(brightness, "brightness");
  range01(contrast, "contrast");
  range01(saturation, "saturation");
  if (!(hue >= 0.0 && hue <= 0.5)) throw ConfigError("augment hue must be in [0, 0.5] turns");
  if (!(rotation_deg >= 0.0 && rotation_deg <= 180.0))
    throw ConfigError("augment rotation_deg must be in [0, 180]");
  if (!(crop_fraction > 0.0 && crop_fraction <= 1.0))
    throw ConfigError("augment crop_fraction must be in (0, 1]");
}

AugmentConfig default_bc_augment() {
  AugmentConfig cfg;
  cfg.brightness = 0.1;
  cfg.contrast = 0.1;
  cfg.saturation = 0.1;
  cfg.hue = 0.05;
  cfg.rotation_deg = 5.0;
  cfg.crop_fraction = 0.9;
  return cfg;
}

void TrainConfig::validate() const {
  if (!(lr_peak > 0.0)) throw ConfigError("lr_peak must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (!(ema_decay > 0.0 && ema_decay < 1.0)) throw ConfigError("ema_decay must be in (0, 1)");
  if (warmup_steps < 0 || stable_steps < 0 || decay_steps < 0)
    throw ConfigError("schedule phase lengths must be non-negative");
  if (total_steps() < 1) throw ConfigError("schedule must cover at least one step");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (k_inference < 1) throw ConfigError("k_inference must be at least 1");
  if (horizon < 1) throw ConfigError("horizon must be at least 1");
  if (!(beta_alpha > 0.0 && beta_beta > 0.0))
    throw ConfigError("beta parameters must be positive");
  if (!(beta_shift >= 0.0 && beta_shift <= 1.0))
    throw ConfigError("beta_shift must be in [0, 1]");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
    throw ConfigError("adam betas must be in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  augment.validate();
}

namespace {

Json augment_to_json(const AugmentConfig& cfg) {
  return Json{{"brightness", cfg.brightness}, {"contrast", cfg.contrast},
              {"saturation", cfg.saturation}, {"hue", cfg.hue},
              {"rotation_deg", cfg.rotation_deg}, {"crop_fraction", cfg.crop_fraction}};
}

AugmentConfig augment_from_json(const Json& j) {
  AugmentConfig cfg;
  cfg.brightness = j.value("brightness", cfg.brightness);
  cfg.contrast = j.value("contrast", cfg.contrast);
  cfg.saturation = j.value("saturation", cfg.saturation);
  cfg.hue = j.value("hue", cfg.hue);
  cfg.rotation_deg = j.value("rotation_deg", cfg.rotation_deg);
  cfg.crop_fraction = j.value("crop_fraction", cfg.crop_fraction);
  return cfg;
}

}  // namespace

Json train_config_to_json(const TrainConfig& cfg) {
  Json j{{"lr_peak", cfg.lr_peak},
         {"weight_decay", cfg.weight_decay},
         {"ema_decay", cfg.ema_decay},
         {"warmup_steps", cfg.warmup_steps},
         {"stable_steps", cfg.stable_steps},
         {"decay_steps", cfg.decay_steps},
         {"batch_size", cfg.batch_size},
         {"k_inference", cfg.k_inference},
         {"horizon", cfg.horizon},
         {"beta_alpha", cfg.beta_alpha},
         {"beta_beta", cfg.beta_beta},
         {"beta_shift", cfg.beta_shift},
         {"adam_beta1", cfg.adam_beta1},
         {"adam_beta2", cfg.adam_beta2},
         {"adam_eps", cfg.adam_eps}};
  j["augment"] = augment_to_json(cfg.augment);
  return j;
}

TrainConfig train_config_from_json(const Json& j) {
  TrainConfig cfg;
  try {
    cfg.lr_peak = j.value("lr_peak", cfg.lr_peak);
    cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
    cfg.ema_decay = j.value("ema_decay", cfg.ema_decay);
    cfg.warmup_steps = j.value("warmup_steps", cfg.warmup_steps);
    cfg.stable_steps = j.value("stable_steps", cfg.stable_steps);
    cfg.decay_steps = j.value("decay_steps", cfg.decay_steps);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.k_inference = j.value("k_inference", cfg.k_inference);
    cfg.horizon = j.value("horizon", cfg.horizon);
    cfg.beta_alpha = j.value("beta_alpha", cfg.beta_alpha);
    cfg.beta_beta = j.value("beta_beta", cfg.beta_beta);
    cfg.beta_shift = j.value("beta_shift", cfg.beta_shift);
    cfg.adam_beta1 = j.value("adam_beta1", cfg.adam_beta1);
    cfg.adam_beta2 = j.value("adam_beta2", cfg.adam_beta2);
    cfg.adam_eps = j.value("adam_eps", cfg.adam_eps);
    if (j.contains("augment")) cfg.augment = augment_from_json(j.at("augment"));
  } catch (const Json::exception& e) {
    throw FormatError(std::string("train config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------- models

void VelocityModel::forward_wide(const std::vector<double>& a_t, const ImageU8& obs, double t,
                                 std::vector<long double>& out) const {
  std::vector<double> narrow;
  forward(a_t, obs, t, narrow);
  out.assign(narrow.begin(), narrow.end());
}

LinearVelocityModel::LinearVelocityModel(int horizon, int action_dim, std::uint64_t seed)
    : horizon_(horizon), action_dim_(action_dim) {
  if (horizon < 1 || action_dim < 1)
    throw ConfigError("linear velocity model needs positive horizon and action_dim");
  const int hd = horizon * action_dim;
  theta_.resize(static_cast<std::size_t>(4) * hd);
  Rng rng(derive_seed(seed, hash_string("linear-model")));
  for (auto& p : theta_) p = rng.normal() * 0.2;
}

void LinearVelocityModel::forward(const std::vector<double>& a_t, const ImageU8& obs, double t,
                                  std::vector<double>& out,
                                  std::unique_ptr<Tape>* tape_out) const {
  const int hd = horizon_ * action_dim_;
  if (static_cast<int>(a_t.size()) != hd)
    throw DimensionError("noisy chunk size does not match the model");
  const double mean = mean_pixel_value(obs);
  out.resize(hd);
  const double* w_a = theta_.data();
  const double* w_t = w_a + hd;
  const double* w_m = w_t + hd;
  const double* b = w_m + hd;
  for (int i = 0; i < hd; ++i) out[i] = w_a[i] * a_t[i] + w_t[i] * t + w_m[i] * mean + b[i];
  if (tape_out) {
    auto tape = std::make_unique<LinearTape>();
    tape->a_t = a_t;
    tape->t = t;
    tape->mean_pixel = mean;
    *tape_out = std::move(tape);
  }
}

void LinearVelocityModel::forward_wide(const std::vector<double>& a_t, const ImageU8& obs,
                                       double t, std::vector<long double>& out) const {
  const int hd = horizon_ * action_dim_;
  if (static_cast<int>(a_t.size()) != hd)
    throw DimensionError("noisy chunk size does not match the model");
  const long double mean = mean_pixel_value(obs);
  out.resize(hd);
  const double* w_a = theta_.data();
  const double* w_t = w_a + hd;
  const double* w_m = w_t + hd;
  const double* b = w_m + hd;
  for (int i = 0; i < hd; ++i) {
    out[i] = static_cast<long double>(w_a[i]) * a_t[i] + static_cast<long double>(w_t[i]) * t +
             static_cast<long double>(w_m[i]) * mean + b[i];
  }
}

void LinearVelocityModel::backward(const Tape& tape, const std::vector<double>& g_out,
                                   std::vector<double>& grad) const {
  const auto* tp = dynamic_cast<const LinearTape*>(&tape);
  if (!tp) throw ValidationError("tape does not belong to this model");
  const int hd = horizon_ * action_dim_;
  if (static_cast<int>(g_out.size()) != hd || grad.size() != theta_.size())
    throw DimensionError("gradient buffers do not match the model");
  for (int i = 0; i < hd; ++i) {
    const double g = g_out[i];
    grad[i] += g * tp->a_t[i];
    grad[hd + i] += g * tp->t;
    grad[2 * hd + i] += g * tp->mean_pixel;
    grad[3 * hd + i] += g;
  }
}

AttentionVelocityModel::AttentionVelocityModel(int horizon, int action_dim, int obs_size,
                                               std::uint64_t seed)
    : horizon_(horizon), action_dim_(action_dim), obs_size_(obs_size) {
  if (horizon < 1 || action_dim < 1)
    throw ConfigError("attention velocity model needs positive horizon and action_dim");
  if (obs_size < 8 || obs_size % 8 != 0)
    throw ConfigError("obs_size must be a positive multiple of 8");
  const Shape sh = make_shape(horizon, action_dim, obs_size);
  theta_.assign(sh.total, 0.0);
  Rng rng(derive_seed(seed, hash_string("attention-model")));
  auto fill = [&](int off, int n, double scale) {
    for (int i = 0; i < n; ++i) theta_[off + i] = rng.normal() * scale;
  };
  auto ones = [&](int off, int n) {
    for (int i = 0; i < n; ++i) theta_[off + i] = 1.0;
  };
  for (int l = 0; l < 3; ++l)
    fill(sh.conv_w[l], kConvC[l + 1] * kConvC[l] * 9, std::sqrt(2.0 / (kConvC[l] * 9)));
  fill(sh.obs_proj_w, kConvC[3] * kDModel, std::sqrt(1.0 / kConvC[3]));
  fill(sh.obs_pos, sh.n_obs * kDModel, 0.02);
  fill(sh.act_in_w, sh.in_dim * kDModel, std::sqrt(1.0 / sh.in_dim));
  fill(sh.act_pos, horizon * kDModel, 0.02);
  // Residual branch outputs (wo, m2) start at zero, so every block begins as
  // the identity; their first gradients still arrive through cat and h1.
  const double wscale = std::sqrt(1.0 / kDModel);
  for (const auto& b : sh.blk) {
    ones(b.ln1_g, kDModel);
    for (int w : {b.self.wq, b.self.wk, b.self.wv}) fill(w, kDModel * kDModel, wscale);
    ones(b.ln2_g, kDModel);
    for (int w : {b.cross.wq, b.cross.wk, b.cross.wv}) fill(w, kDModel * kDModel, wscale);
    ones(b.ln3_g, kDModel);
    fill(b.m1, kDModel * kMlpHidden, wscale);
  }
  ones(sh.lnf_g, kDModel);
  fill(sh.head_w, kDModel * action_dim, 0.01);
}

void AttentionVelocityModel::forward(const std::vector<double>& a_t, const ImageU8& obs,
                                     double t, std::vector<double>& out,
                                     std::unique_ptr<Tape>* tape_out) const {
  const Shape sh = make_shape(horizon_, action_dim_, obs_size_);
  if (static_cast<int>(a_t.size()) != sh.H * sh.D)
    throw DimensionError("noisy chunk size does not match the model");
  if (obs.channels() != 3 || obs.width() != obs_size_ || obs.height() != obs_size_)
    throw DimensionError("obs raster must be RGB " + std::to_string(obs_size_) + "x" +
                         std::to_string(obs_size_));
  const double* th = theta_.data();
  auto tape = std::make_unique<AttentionTape>();
  AttentionTape& tp = *tape;

  // Observation encoder: three stride-2 convs, then one token per cell.
  const int S = sh.S;
  tp.x0.resize(static_cast<std::size_t>(3) * S * S);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x)
        tp.x0[(static_cast<std::ptrdiff_t>(c) * S + y) * S + x] = obs.at(x, y, c) / 255.0;
  const int S1 = S / 2, S2 = S / 4, S3 = S / 8;
  tp.c1.resize(static_cast<std::size_t>(kConvC[1]) * S1 * S1);
  tp.c2.resize(static_cast<std::size_t>(kConvC[2]) * S2 * S2);
  tp.c3.resize(static_cast<std::size_t>(kConvC[3]) * S3 * S3);
  conv_relu_fwd(tp.x0.data(), 3, S, th + sh.conv_w[0], th + sh.conv_b[0], kConvC[1],
                tp.c1.data());
  conv_relu_fwd(tp.c1.data(), kConvC[1], S1, th + sh.conv_w[1], th + sh.conv_b[1], kConvC[2],
                tp.c2.data());
  conv_relu_fwd(tp.c2.data(), kConvC[2], S2, th + sh.conv_w[2], th + sh.conv_b[2], kConvC[3],
                tp.c3.data());
  tp.tok_in.resize(static_cast<std::size_t>(sh.n_obs) * kConvC[3]);
  for (int p = 0; p < sh.n_obs; ++p)
    for (int c = 0; c < kConvC[3]; ++c)
      tp.tok_in[static_cast<std::ptrdiff_t>(p) * kConvC[3] + c] =
          tp.c3[static_cast<std::ptrdiff_t>(c) * sh.n_obs + p];
  tp.E.resize(static_cast<std::size_t>(sh.n_obs) * kDModel);
  linear_fwd(tp.tok_in.data(), sh.n_obs, kConvC[3], kDModel, th + sh.obs_proj_w,
             th + sh.obs_proj_b, tp.E.data());
  for (std::size_t i = 0; i < tp.E.size(); ++i) tp.E[i] += th[sh.obs_pos + i];

  // Action tokens: one per timestep, action row plus sinusoidal t features.
  tp.u.resize(static_cast<std::size_t>(sh.H) * sh.in_dim);
  double tfeat[kTimeFeats];
  time_features(t, tfeat);
  for (int h = 0; h < sh.H; ++h) {
    double* row = tp.u.data() + static_cast<std::ptrdiff_t>(h) * sh.in_dim;
    for (int d = 0; d < sh.D; ++d) row[d] = a_t[static_cast<std::ptrdiff_t>(h) * sh.D + d];
    for (int f = 0; f < kTimeFeats; ++f) row[sh.D + f] = tfeat[f];
  }
  tp.X0.resize(static_cast<std::size_t>(sh.H) * kDModel);
  linear_fwd(tp.u.data(), sh.H, sh.in_dim, kDModel, th + sh.act_in_w, th + sh.act_in_b,
             tp.X0.data());
  for (std::size_t i = 0; i < tp.X0.size(); ++i) tp.X0[i] += th[sh.act_pos + i];

  const std::size_t xn = static_cast<std::size_t>(sh.H) * kDModel;
  std::vector<double> X = tp.X0;
  for (int bi = 0; bi < 2; ++bi) {
    const BlockOffsets& bo = sh.blk[bi];
    AttentionTape::Block& bt = tp.b[bi];
    bt.x_in = X;
    bt.ln1_out.resize(xn);
    bt.ln1_xhat.resize(xn);
    bt.ln1_inv.resize(sh.H);
    layernorm_fwd(bt.x_in.data(), sh.H, kDModel, th + bo.ln1_g, th + bo.ln1_b,
                  bt.ln1_out.data(), bt.ln1_xhat.data(), bt.ln1_inv.data());
    bt.q.resize(xn);
    bt.k.resize(xn);
    bt.v.resize(xn);
    bt.soft.resize(static_cast<std::size_t>(kHeads) * sh.H * sh.H);
    bt.cat.resize(xn);
    attention_fwd(bt.ln1_out.data(), sh.H, bt.ln1_out.data(), sh.H, th, bo.self, bt.q.data(),
                  bt.k.data(), bt.v.data(), bt.soft.data(), bt.cat.data(), X.data());
    bt.x_self = X;
    bt.ln2_out.resize(xn);
    bt.ln2_xhat.resize(xn);
    bt.ln2_inv.resize(sh.H);
    layernorm_fwd(bt.x_self.data(), sh.H, kDModel, th + bo.ln2_g, th + bo.ln2_b,
                  bt.ln2_out.data(), bt.ln2_xhat.data(), bt.ln2_inv.data());
    bt.cq.resize(xn);
    bt.ck.resize(tp.E.size());
    bt.cv.resize(tp.E.size());
    bt.csoft.resize(static_cast<std::size_t>(kHeads) * sh.H * sh.n_obs);
    bt.ccat.resize(xn);
    attention_fwd(bt.ln2_out.data(), sh.H, tp.E.data(), sh.n_obs, th, bo.cross, bt.cq.data(),
                  bt.ck.data(), bt.cv.data(), bt.csoft.data(), bt.ccat.data(), X.data());
    bt.x_cross = X;
    bt.ln3_out.resize(xn);
    bt.ln3_xhat.resize(xn);
    bt.ln3_inv.resize(sh.H);
    layernorm_fwd(bt.x_cross.data(), sh.H, kDModel, th + bo.ln3_g, th + bo.ln3_b,
                  bt.ln3_out.data(), bt.ln3_xhat.data(), bt.ln3_inv.data());
    bt.h1.resize(static_cast<std::size_t>(sh.H) * kMlpHidden);
    linear_fwd(bt.ln3_out.data(), sh.H, kDModel, kMlpHidden, th + bo.m1, th + bo.mb1,
               bt.h1.data());
    for (auto& v : bt.h1) v = v > 0.0 ? v : 0.0;
    std::vector<double> m2out(xn);
    linear_fwd(bt.h1.data(), sh.H, kMlpHidden, kDModel, th + bo.m2, th + bo.mb2, m2out.data());
    for (std::size_t i = 0; i < xn; ++i) X[i] += m2out[i];
    bt.x_out = X;
  }
  tp.lnf_out.resize(xn);
  tp.lnf_xhat.resize(xn);
  tp.lnf_inv.resize(sh.H);
  layernorm_fwd(X.data(), sh.H, kDModel, th + sh.lnf_g, th + sh.lnf_b, tp.lnf_out.data(),
                tp.lnf_xhat.data(), tp.lnf_inv.data());
  out.resize(static_cast<std::size_t>(sh.H) * sh.D);
  linear_fwd(tp.lnf_out.data(), sh.H, kDModel, sh.D, th + sh.head_w, th + sh.head_b,
             out.data());
  if (tape_out) *tape_out = std::move(tape);
}

void AttentionVelocityModel::forward_wide(const std::vector<double>& a_t, const ImageU8& obs,
                                          double t, std::vector<long double>& out) const {
  using W = long double;
  const Shape sh = make_shape(horizon_, action_dim_, obs_size_);
  if (static_cast<int>(a_t.size()) != sh.H * sh.D)
    throw DimensionError("noisy chunk size does not match the model");
  if (obs.channels() != 3 || obs.width() != obs_size_ || obs.height() != obs_size_)
    throw DimensionError("obs raster must be RGB " + std::to_string(obs_size_) + "x" +
                         std::to_string(obs_size_));
  const double* th = theta_.data();

  const int S = sh.S, S1 = S / 2, S2 = S / 4, S3 = S / 8;
  std::vector<W> x0(static_cast<std::size_t>(3) * S * S);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x)
        x0[(static_cast<std::ptrdiff_t>(c) * S + y) * S + x] = obs.at(x, y, c) / W(255);
  std::vector<W> c1(static_cast<std::size_t>(kConvC[1]) * S1 * S1);
  std::vector<W> c2(static_cast<std::size_t>(kConvC[2]) * S2 * S2);
  std::vector<W> c3(static_cast<std::size_t>(kConvC[3]) * S3 * S3);
  conv_relu_fwd(x0.data(), 3, S, th + sh.conv_w[0], th + sh.conv_b[0], kConvC[1], c1.data());
  conv_relu_fwd(c1.data(), kConvC[1], S1, th + sh.conv_w[1], th + sh.conv_b[1], kConvC[2],
                c2.data());
  conv_relu_fwd(c2.data(), kConvC[2], S2, th + sh.conv_w[2], th + sh.conv_b[2], kConvC[3],
                c3.data());
  std::vector<W> tok_in(static_cast<std::size_t>(sh.n_obs) * kConvC[3]);
  for (int p = 0; p < sh.n_obs; ++p)
    for (int c = 0; c < kConvC[3]; ++c)
      tok_in[static_cast<std::ptrdiff_t>(p) * kConvC[3] + c] =
          c3[static_cast<std::ptrdiff_t>(c) * sh.n_obs + p];
  std::vector<W> E(static_cast<std::size_t>(sh.n_obs) * kDModel);
  linear_fwd(tok_in.data(), sh.n_obs, kConvC[3], kDModel, th + sh.obs_proj_w, th + sh.obs_proj_b,
             E.data());
  for (std::size_t i = 0; i < E.size(); ++i) E[i] += th[sh.obs_pos + i];

  std::vector<W> u(static_cast<std::size_t>(sh.H) * sh.in_dim);
  W tfeat[kTimeFeats];
  time_features(static_cast<W>(t), tfeat);
  for (int h = 0; h < sh.H; ++h) {
    W* row = u.data() + static_cast<std::ptrdiff_t>(h) * sh.in_dim;
    for (int d = 0; d < sh.D; ++d) row[d] = a_t[static_cast<std::ptrdiff_t>(h) * sh.D + d];
    for (int f = 0; f < kTimeFeats; ++f) row[sh.D + f] = tfeat[f];
  }
  const std::size_t xn = static_cast<std::size_t>(sh.H) * kDModel;
  std::vector<W> X(xn);
  linear_fwd(u.data(), sh.H, sh.in_dim, kDModel, th + sh.act_in_w, th + sh.act_in_b, X.data());
  for (std::size_t i = 0; i < xn; ++i) X[i] += th[sh.act_pos + i];

  std::vector<W> ln(xn), xhat(xn), inv(sh.H);
  std::vector<W> q(xn), k(xn), v(xn), cat(xn);
  std::vector<W> ck(E.size()), cv(E.size());
  std::vector<W> soft(static_cast<std::size_t>(kHeads) * sh.H * sh.H);
  std::vector<W> csoft(static_cast<std::size_t>(kHeads) * sh.H * sh.n_obs);
  std::vector<W> h1(static_cast<std::size_t>(sh.H) * kMlpHidden);
  std::vector<W> m2out(xn);
  for (int bi = 0; bi < 2; ++bi) {
    const BlockOffsets& bo = sh.blk[bi];
    layernorm_fwd(X.data(), sh.H, kDModel, th + bo.ln1_g, th + bo.ln1_b, ln.data(), xhat.data(),
                  inv.data());
    attention_fwd(ln.data(), sh.H, ln.data(), sh.H, th, bo.self, q.data(), k.data(), v.data(),
                  soft.data(), cat.data(), X.data());
    layernorm_fwd(X.data(), sh.H, kDModel, th + bo.ln2_g, th + bo.ln2_b, ln.data(), xhat.data(),
                  inv.data());
    attention_fwd(ln.data(), sh.H, E.data(), sh.n_obs, th, bo.cross, q.data(), ck.data(),
                  cv.data(), csoft.data(), cat.data(), X.data());
    layernorm_fwd(X.data(), sh.H, kDModel, th + bo.ln3_g, th + bo.ln3_b, ln.data(), xhat.data(),
                  inv.data());
    linear_fwd(ln.data(), sh.H, kDModel, kMlpHidden, th + bo.m1, th + bo.mb1, h1.data());
    for (auto& h : h1) h = h > W(0) ? h : W(0);
    linear_fwd(h1.data(), sh.H, kMlpHidden, kDModel, th + bo.m2, th + bo.mb2, m2out.data());
    for (std::size_t i = 0; i < xn; ++i) X[i] += m2out[i];
  }
  layernorm_fwd(X.data(), sh.H, kDModel, th + sh.lnf_g, th + sh.lnf_b, ln.data(), xhat.data(),
                inv.data());
  out.resize(static_cast<std::size_t>(sh.H) * sh.D);
  linear_fwd(ln.data(), sh.H, kDModel, sh.D, th + sh.head_w, th + sh.head_b, out.data());
}

void AttentionVelocityModel::backward(const Tape& tape, const std::vector<double>& g_out,
                                      std::vector<double>& grad) const {
  const auto* tpp = dynamic_cast<const AttentionTape*>(&tape);
  if (!tpp) throw ValidationError("tape does not belong to this model");
  const AttentionTape& tp = *tpp;
  const Shape sh = make_shape(horizon_, action_dim_, obs_size_);
  if (static_cast<int>(g_out.size()) != sh.H * sh.D || grad.size() != theta_.size())
    throw DimensionError("gradient buffers do not match the model");
  const double* th = theta_.data();
  double* g = grad.data();
  const std::size_t xn = static_cast<std::size_t>(sh.H) * kDModel;

  std::vector<double> gY(xn, 0.0);
  linear_bwd(tp.lnf_out.data(), g_out.data(), sh.H, kDModel, sh.D, th + sh.head_w,
             g + sh.head_w, g + sh.head_b, gY.data());
  std::vector<double> gX(xn, 0.0);
  layernorm_bwd(tp.lnf_xhat.data(), tp.lnf_inv.data(), th + sh.lnf_g, gY.data(), sh.H, kDModel,
                g + sh.lnf_g, g + sh.lnf_b, gX.data());
  std::vector<double> gE(tp.E.size(), 0.0);

  for (int bi = 1; bi >= 0; --bi) {
    const BlockOffsets& bo = sh.blk[bi];
    const AttentionTape::Block& bt = tp.b[bi];
    // MLP sublayer; the residual passes gX through unchanged.
    std::vector<double> gh1(bt.h1.size(), 0.0);
    linear_bwd(bt.h1.data(), gX.data(), sh.H, kMlpHidden, kDModel, th + bo.m2, g + bo.m2,
               g + bo.mb2, gh1.data());
    for (std::size_t i = 0; i < gh1.size(); ++i)
      if (bt.h1[i] <= 0.0) gh1[i] = 0.0;
    std::vector<double> gln3(xn, 0.0);
    linear_bwd(bt.ln3_out.data(), gh1.data(), sh.H, kDModel, kMlpHidden, th + bo.m1, g + bo.m1,
               g + bo.mb1, gln3.data());
    layernorm_bwd(bt.ln3_xhat.data(), bt.ln3_inv.data(), th + bo.ln3_g, gln3.data(), sh.H,
                  kDModel, g + bo.ln3_g, g + bo.ln3_b, gX.data());
    // Cross-attention sublayer; keys and values come from the obs tokens.
    std::vector<double> gln2(xn, 0.0);
    attention_bwd(bt.ln2_out.data(), sh.H, tp.E.data(), sh.n_obs, th, bo.cross, bt.cq.data(),
                  bt.ck.data(), bt.cv.data(), bt.csoft.data(), bt.ccat.data(), gX.data(), g,
                  gln2.data(), gE.data());
    layernorm_bwd(bt.ln2_xhat.data(), bt.ln2_inv.data(), th + bo.ln2_g, gln2.data(), sh.H,
                  kDModel, g + bo.ln2_g, g + bo.ln2_b, gX.data());
    // Self-attention sublayer; query and key/value inputs coincide.
    std::vector<double> gln1(xn, 0.0);
    attention_bwd(bt.ln1_out.data(), sh.H, bt.ln1_out.data(), sh.H, th, bo.self, bt.q.data(),
                  bt.k.data(), bt.v.data(), bt.soft.data(), bt.cat.data(), gX.data(), g,
                  gln1.data(), gln1.data());
    layernorm_bwd(bt.ln1_xhat.data(), bt.ln1_inv.data(), th + bo.ln1_g, gln1.data(), sh.H,
                  kDModel, g + bo.ln1_g, g + bo.ln1_b, gX.data());
  }

  // Action embedding: X0 = u * W_in + b_in + act_pos.
  linear_bwd(tp.u.data(), gX.data(), sh.H, sh.in_dim, kDModel, th + sh.act_in_w,
             g + sh.act_in_w, g + sh.act_in_b, nullptr);
  for (std::size_t i = 0; i < xn; ++i) g[sh.act_pos + i] += gX[i];

  // Obs tokens: E = tok_in * W_proj + b_proj + obs_pos, then the conv chain.
  for (std::size_t i = 0; i < gE.size(); ++i) g[sh.obs_pos + i] += gE[i];
  std::vector<double> gtok(tp.tok_in.size(), 0.0);
  linear_bwd(tp.tok_in.data(), gE.data(), sh.n_obs, kConvC[3], kDModel, th + sh.obs_proj_w,
             g + sh.obs_proj_w, g + sh.obs_proj_b, gtok.data());
  std::vector<double> gc3(tp.c3.size(), 0.0);
  for (int p = 0; p < sh.n_obs; ++p)
    for (int c = 0; c < kConvC[3]; ++c)
      gc3[static_cast<std::ptrdiff_t>(c) * sh.n_obs + p] =
          gtok[static_cast<std::ptrdiff_t>(p) * kConvC[3] + c];
  const int S = sh.S, S1 = S / 2, S2 = S / 4;
  std::vector<double> gc2(tp.c2.size(), 0.0);
  conv_relu_bwd(tp.c2.data(), kConvC[2], S2, th + sh.conv_w[2], kConvC[3], tp.c3.data(),
                gc3.data(), g + sh.conv_w[2], g + sh.conv_b[2], gc2.data());
  std::vector<double> gc1(tp.c1.size(), 0.0);
  conv_relu_bwd(tp.c1.data(), kConvC[1], S1, th + sh.conv_w[1], kConvC[2], tp.c2.data(),
                gc2.data(), g + sh.conv_w[1], g + sh.conv_b[1], gc1.data());
  conv_relu_bwd(tp.x0.data(), 3, S, th + sh.conv_w[0], kConvC[1], tp.c1.data(), gc1.data(),
                g + sh.conv_w[0], g + sh.conv_b[0], nullptr);
}

std::unique_ptr<VelocityModel> make_velocity_model(const std::string& kind, int horizon,
                                                   int action_dim, int obs_size,
                                                   std::uint64_t seed) {
  if (kind == "attention")
    return std::make_unique<AttentionVelocityModel>(horizon, action_dim, obs_size, seed);
  if (kind == "linear") return std::make_unique<LinearVelocityModel>(horizon, action_dim, seed);
  throw ConfigError("unknown velocity model kind: " + kind);
}

// ---------------------------------------------------------------- flow ops

double sample_timestep(Rng& rng, double alpha, double beta, double shift) {
  if (!(alpha > 0.0 && beta > 0.0)) throw ConfigError("beta parameters must be positive");
  if (!(shift >= 0.0 && shift <= 1.0)) throw ConfigError("beta_shift must be in [0, 1]");
  return 1.0 - shift * rng.beta(alpha, beta);
}

std::vector<double> make_noisy(const std::vector<double>& a, const std::vector<double>& eps,
                               double t) {
  if (a.size() != eps.size()) throw DimensionError("chunk and noise sizes differ");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = (1.0 - t) * eps[i] + t * a[i];
  return out;
}

namespace {

// Shared batch walk for loss and loss+gradient. Per-sample losses and
// gradients land in slots and reduce in batch order, so the result is
// identical for any job count.
double batch_loss(const VelocityModel& model, const std::vector<FlowSample>& batch,
                  std::vector<double>* grad) {
  if (batch.empty()) throw ValidationError("flow-matching loss needs a non-empty batch");
  const int hd = model.horizon() * model.action_dim();
  const std::size_t n = batch.size();
  const std::size_t np = model.n_params();
  std::vector<double> losses(n, 0.0);
  std::vector<std::vector<double>> gslots(grad ? n : 0);
  std::vector<std::exception_ptr> errors(n);
  par::for_each_index(static_cast<std::ptrdiff_t>(n), [&](std::ptrdiff_t i) {
    try {
      const FlowSample& s = batch[i];
      if (static_cast<int>(s.a.size()) != hd || static_cast<int>(s.eps.size()) != hd)
        throw DimensionError("flow sample " + std::to_string(i) +
                             " does not match the model chunk size");
      const std::vector<double> a_t = make_noisy(s.a, s.eps, s.t);
      std::vector<double> out;
      std::unique_ptr<VelocityModel::Tape> tape;
      model.forward(a_t, s.obs, s.t, out, grad ? &tape : nullptr);
      double sum = 0.0;
      std::vector<double> g_out(grad ? out.size() : 0);
      for (int e = 0; e < hd; ++e) {
        const double r = out[e] - (s.a[e] - s.eps[e]);
        sum += r * r;
        if (grad) g_out[e] = 2.0 * r / (static_cast<double>(n) * hd);
      }
      losses[i] = sum;
      if (grad) {
        gslots[i].assign(np, 0.0);
        model.backward(*tape, g_out, gslots[i]);
      }
    } catch (...) {
      errors[i] = std::current_exception();
    }
  });
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  double total = 0.0;
  for (double l : losses) total += l;
  total /= static_cast<double>(n) * hd;
  if (!std::isfinite(total)) throw NumericError("model produced non-finite outputs");
  if (grad) {
    grad->assign(np, 0.0);
    for (const auto& gs : gslots)
      for (std::size_t e = 0; e < np; ++e) (*grad)[e] += gs[e];
  }
  return total;
}

}  // namespace

double cfm_loss(const VelocityModel& model, const std::vector<FlowSample>& batch) {
  return batch_loss(model, batch, nullptr);
}

double cfm_loss_grad(const VelocityModel& model, const std::vector<FlowSample>& batch,
                     std::vector<double>& grad) {
  return batch_loss(model, batch, &grad);
}

namespace {

// Extended-precision batch loss through forward_wide; the double loss is too
// coarse for central differences (their error floor is eps * loss / h).
long double wide_loss(const VelocityModel& model, const std::vector<FlowSample>& batch) {
  const int hd = model.horizon() * model.action_dim();
  std::vector<long double> vel;
  long double total = 0.0L;
  for (const FlowSample& s : batch) {
    const std::vector<double> a_t = make_noisy(s.a, s.eps, s.t);
    model.forward_wide(a_t, s.obs, s.t, vel);
    for (int e = 0; e < hd; ++e) {
      const long double r = vel[e] - (static_cast<long double>(s.a[e]) - s.eps[e]);
      total += r * r;
    }
  }
  return total / (static_cast<long double>(batch.size()) * hd);
}

}  // namespace

double grad_check(VelocityModel& model, const std::vector<FlowSample>& batch, double h,
                  int n_coords, std::uint64_t seed) {
  if (!(h > 0.0)) throw ValidationError("grad_check step must be positive");
  std::vector<double> analytic;
  cfm_loss_grad(model, batch, analytic);
  std::vector<double>& theta = model.params();
  const std::size_t np = theta.size();
  std::vector<std::size_t> coords;
  if (static_cast<std::size_t>(n_coords) >= np) {
    coords.resize(np);
    for (std::size_t i = 0; i < np; ++i) coords[i] = i;
  } else {
    Rng rng(derive_seed(seed, hash_string("grad-check")));
    std::vector<bool> taken(np, false);
    while (static_cast<int>(coords.size()) < n_coords) {
      const std::size_t i = rng.uniform_index(np);
      if (taken[i]) continue;
      taken[i] = true;
      coords.push_back(i);
    }
  }
  double worst = 0.0;
  for (std::size_t i : coords) {
    const double old = theta[i];
    theta[i] = old + h;
    const long double hp = static_cast<long double>(theta[i]) - old;
    const long double lp = wide_loss(model, batch);
    theta[i] = old - h;
    const long double hm = static_cast<long double>(old) - theta[i];
    const long double lm = wide_loss(model, batch);
    theta[i] = old;
    // hp and hm are the step sizes actually applied after rounding theta.
    const long double numeric = (lp - lm) / (hp + hm);
    const long double rel = std::abs(static_cast<long double>(analytic[i]) - numeric) /
                            std::max(std::abs(numeric), 1e-8L);
    worst = std::max(worst, static_cast<double>(rel));
  }
  return worst;
}

std::vector<double> euler_sample(const VelocityModel& model, const ImageU8& obs, int k,
                                 Rng& rng) {
  if (k < 1) throw ValidationError("euler_sample needs k >= 1");
  const int hd = model.horizon() * model.action_dim();
  std::vector<double> a(hd);
  for (double& v : a) v = rng.normal();
  std::vector<double> vel;
  for (int i = 0; i < k; ++i) {
    const double t = static_cast<double>(i) / k;
    model.forward(a, obs, t, vel);
    bool finite = true;
    for (int e = 0; e < hd; ++e) {
      a[e] += vel[e] / k;
      finite = finite && std::isfinite(a[e]);
    }
    if (!finite)
      throw NumericError("euler step " + std::to_string(i) + " produced non-finite values");
  }
  return a;
}

void ema_update(std::vector<double>& ema, const std::vector<double>& params, double decay) {
  if (ema.size() != params.size()) throw DimensionError("EMA and parameter sizes differ");
  for (std::size_t i = 0; i < ema.size(); ++i)
    ema[i] = decay * ema[i] + (1.0 - decay) * params[i];
}

double wsd_lr(int step, const TrainConfig& cfg) {
  if (step < 0) throw ValidationError("schedule step must be non-negative");
  if (step < cfg.warmup_steps)
    return cfg.lr_peak * static_cast<double>(step) / cfg.warmup_steps;
  if (step < cfg.warmup_steps + cfg.stable_steps) return cfg.lr_peak;
  const int into = step - cfg.warmup_steps - cfg.stable_steps;
  if (into < cfg.decay_steps)
    return cfg.lr_peak * (1.0 - static_cast<double>(into) / cfg.decay_steps);
  return 0.0;
}

// ---------------------------------------------------------------- augment

namespace {

double sample_plane(const std::vector<double>& img, int w, int h, int c, double x, double y) {
  const double cx = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const double cy = std::clamp(y, 0.0, static_cast<double>(h - 1));
  const int x0 = static_cast<int>(std::floor(cx));
  const int y0 = static_cast<int>(std::floor(cy));
  const int x1 = std::min(x0 + 1, w - 1);
  const int y1 = std::min(y0 + 1, h - 1);
  const double fx = cx - x0, fy = cy - y0;
  auto at = [&](int xx, int yy) {
    return img[(static_cast<std::ptrdiff_t>(c) * h + yy) * w + xx];
  };
  const double top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
  const double bot = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
  return top * (1.0 - fy) + bot * fy;
}

}  // namespace

ImageU8 augment(const ImageU8& obs, Rng& rng, const AugmentConfig& cfg) {
  cfg.validate();
  if (obs.channels() != 3) throw DimensionError("augment expects an RGB raster");
  // A fixed draw count keeps the stream aligned across configs.
  const double fb = 1.0 + cfg.brightness * (2.0 * rng.uniform() - 1.0);
  const double fc = 1.0 + cfg.contrast * (2.0 * rng.uniform() - 1.0);
  const double fs = 1.0 + cfg.saturation * (2.0 * rng.uniform() - 1.0);
  const double hue_turns = cfg.hue * (2.0 * rng.uniform() - 1.0);
  const double angle_deg = cfg.rotation_deg * (2.0 * rng.uniform() - 1.0);
  const double frac = 1.0 - (1.0 - cfg.crop_fraction) * rng.uniform();
  const double off_x = rng.uniform();
  const double off_y = rng.uniform();

  const int w = obs.width(), h = obs.height();
  std::vector<double> img(static_cast<std::size_t>(3) * w * h);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        img[(static_cast<std::ptrdiff_t>(c) * h + y) * w + x] = obs.at(x, y, c) / 255.0;
  auto px = [&](int c, int y, int x) -> double& {
    return img[(static_cast<std::ptrdiff_t>(c) * h + y) * w + x];
  };

  if (fb != 1.0)
    for (auto& v : img) v *= fb;
  if (fc != 1.0)
    for (auto& v : img) v = (v - 0.5) * fc + 0.5;
  if (fs != 1.0) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double luma = 0.299 * px(0, y, x) + 0.587 * px(1, y, x) + 0.114 * px(2, y, x);
        for (int c = 0; c < 3; ++c) px(c, y, x) = luma + fs * (px(c, y, x) - luma);
      }
  }
  if (hue_turns != 0.0) {
    // Rotate the chroma plane of the YIQ decomposition.
    const double th = hue_turns * 6.28318530717958647692;
    const double cs = std::cos(th), sn = std::sin(th);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double r = px(0, y, x), g = px(1, y, x), b = px(2, y, x);
        const double yy = 0.299 * r + 0.587 * g + 0.114 * b;
        const double ii = 0.596 * r - 0.274 * g - 0.322 * b;
        const double qq = 0.211 * r - 0.523 * g + 0.312 * b;
        const double i2 = ii * cs - qq * sn;
        const double q2 = ii * sn + qq * cs;
        px(0, y, x) = yy + 0.956 * i2 + 0.621 * q2;
        px(1, y, x) = yy - 0.272 * i2 - 0.647 * q2;
        px(2, y, x) = yy - 1.106 * i2 + 1.703 * q2;
      }
  }
  for (auto& v : img) v = std::clamp(v, 0.0, 1.0);

  if (angle_deg != 0.0) {
    const double th = angle_deg * 3.14159265358979323846 / 180.0;
    const double cs = std::cos(th), sn = std::sin(th);
    const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
    std::vector<double> rot(img.size());
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const double dx = x - cx, dy = y - cy;
          const double sx = cx + cs * dx + sn * dy;
          const double sy = cy - sn * dx + cs * dy;
          rot[(static_cast<std::ptrdiff_t>(c) * h + y) * w + x] =
              sample_plane(img, w, h, c, sx, sy);
        }
    img.swap(rot);
  }

  if (frac != 1.0) {
    const int cw = std::max(1, static_cast<int>(std::lround(w * frac)));
    const int ch = std::max(1, static_cast<int>(std::lround(h * frac)));
    const double x0 = off_x * (w - cw);
    const double y0 = off_y * (h - ch);
    std::vector<double> crop(img.size());
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const double sx = x0 + (x + 0.5) * cw / static_cast<double>(w) - 0.5;
          const double sy = y0 + (y + 0.5) * ch / static_cast<double>(h) - 0.5;
          crop[(static_cast<std::ptrdiff_t>(c) * h + y) * w + x] =
              sample_plane(img, w, h, c, sx, sy);
        }
    img.swap(crop);
  }

  ImageU8 out(w, h, 3);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out.at(x, y, c) = static_cast<std::uint8_t>(
            std::clamp<long>(std::lround(px(c, y, x) * 255.0), 0, 255));
  return out;
}

// ---------------------------------------------------------------- training

TrainResult train_bc(VelocityModel& model, const std::vector<BcSample>& data,
                     const TrainConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (data.empty()) throw ValidationError("train_bc needs a non-empty dataset");
  const int hd = model.horizon() * model.action_dim();
  if (cfg.horizon != model.horizon())
    throw ConfigError("config horizon does not match the model");
  for (std::size_t i = 0; i < data.size(); ++i)
    if (static_cast<int>(data[i].chunk.size()) != hd)
      throw DimensionError("dataset chunk " + std::to_string(i) +
                           " does not match the model chunk size");

  std::vector<double>& theta = model.params();
  const std::size_t np = theta.size();
  TrainResult result;
  result.ema_params = theta;
  std::vector<double> m(np, 0.0), v(np, 0.0), grad;
  Rng rng(derive_seed(seed, hash_string("train-bc")));
  double last_finite = std::numeric_limits<double>::quiet_NaN();
  const int total = cfg.total_steps();
  result.log.reserve(total);

  for (int step = 0; step < total; ++step) {
    std::vector<FlowSample> batch(cfg.batch_size);
    for (int j = 0; j < cfg.batch_size; ++j) {
      const std::size_t idx = rng.uniform_index(data.size());
      FlowSample& s = batch[j];
      s.a = data[idx].chunk;
      s.obs = augment(data[idx].obs, rng, cfg.augment);
      s.t = sample_timestep(rng, cfg.beta_alpha, cfg.beta_beta, cfg.beta_shift);
      s.eps.resize(hd);
      for (double& e : s.eps) e = rng.normal();
    }
    double loss;
    try {
      loss = cfm_loss_grad(model, batch, grad);
    } catch (const NumericError&) {
      std::ostringstream msg;
      msg << "train_bc aborted at step " << step << ": non-finite loss; last finite loss ";
      if (std::isfinite(last_finite))
        msg << last_finite;
      else
        msg << "none";
      throw NumericError(msg.str());
    }
    const double lr = wsd_lr(step, cfg);
    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, step + 1);
    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, step + 1);
    for (std::size_t i = 0; i < np; ++i) {
      m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * grad[i];
      v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * grad[i] * grad[i];
      const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.adam_eps);
      theta[i] -= lr * (update + cfg.weight_decay * theta[i]);
    }
    ema_update(result.ema_params, theta, cfg.ema_decay);
    result.log.push_back({step, loss, lr});
    last_finite = loss;
  }
  result.steps = total;
  result.final_loss = last_finite;
  return result;
}

void save_training_log(const std::string& path, const std::vector<TrainLogEntry>& log) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  for (const auto& e : log) {
    const Json j{{"step", e.step}, {"loss", e.loss}, {"lr", e.lr}};
    f << j.dump() << '\n';
  }
  if (!f) throw IoError("failed writing " + path);
}

std::vector<TrainLogEntry> load_training_log(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::vector<TrainLogEntry> log;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const Json j = Json::parse(line);
      log.push_back({j.at("step").get<int>(), j.at("loss").get<double>(),
                     j.at("lr").get<double>()});
    } catch (const Json::exception& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return log;
}

// ---------------------------------------------------------------- checkpoint

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  Json j{{"format", "padtrack-checkpoint-v1"},
         {"model_kind", ck.model_kind},
         {"horizon", ck.horizon},
         {"action_dim", ck.action_dim},
         {"obs_size", ck.obs_size},
         {"step", ck.step},
         {"config", train_config_to_json(ck.config)},
         {"params", ck.params},
         {"ema_params", ck.ema_params}};
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << j.dump() << '\n';
  if (!f) throw IoError("failed writing " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  const Json j = read_json(path);
  try {
    if (!j.is_object() || j.value("format", "") != "padtrack-checkpoint-v1")
      throw FormatError(path + ": not a padtrack checkpoint");
    Checkpoint ck;
    ck.model_kind = j.at("model_kind").get<std::string>();
    ck.horizon = j.at("horizon").get<int>();
    ck.action_dim = j.at("action_dim").get<int>();
    ck.obs_size = j.at("obs_size").get<int>();
    ck.step = j.at("step").get<int>();
    ck.config = train_config_from_json(j.at("config"));
    ck.params = j.at("params").get<std::vector<double>>();
    ck.ema_params = j.at("ema_params").get<std::vector<double>>();
    return ck;
  } catch (const Json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
}

std::unique_ptr<VelocityModel> model_from_checkpoint(const Checkpoint& ck, bool use_ema) {
  auto model = make_velocity_model(ck.model_kind, ck.horizon, ck.action_dim, ck.obs_size, 0);
  const std::vector<double>& src = use_ema ? ck.ema_params : ck.params;
  if (src.size() != model->n_params())
    throw DimensionError("checkpoint holds " + std::to_string(src.size()) +
                         " parameters, model expects " + std::to_string(model->n_params()));
  model->params() = src;
  return model;
}

}  // namespace padtrack
