#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "padtrack/action.hpp"
#include "padtrack/image.hpp"
#include "padtrack/jsonio.hpp"
#include "padtrack/rng.hpp"

namespace padtrack {

// Image augmentation ranges. Each range is the maximum symmetric deviation
// from identity; all-zero ranges with crop_fraction 1 is the identity config
// and leaves the raster byte-identical.
struct AugmentConfig {
  double brightness = 0.0;   // multiplicative, factor in 1 +- brightness
  double contrast = 0.0;     // about mid-gray, factor in 1 +- contrast
  double saturation = 0.0;   // toward/away from luma, factor in 1 +- saturation
  double hue = 0.0;          // chroma rotation, turns in +- hue (<= 0.5)
  double rotation_deg = 0.0; // rotation about center, degrees in +- rotation_deg
  double crop_fraction = 1.0; // minimum kept side fraction, (0, 1]

  bool is_identity() const;
  void validate() const;
};

// Mild defaults for behavior-cloning runs.
AugmentConfig default_bc_augment();

struct TrainConfig {
  double lr_peak = 1e-4;
  double weight_decay = 1e-3;
  double ema_decay = 0.9999;
  int warmup_steps = 100;
  int stable_steps = 1800;
  int decay_steps = 100;
  int batch_size = 16;
  int k_inference = 16;
  int horizon = 16;
  double beta_alpha = 1.5;
  double beta_beta = 1.0;
  double beta_shift = 0.999;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_eps = 1e-8;
  AugmentConfig augment;

  int total_steps() const { return warmup_steps + stable_steps + decay_steps; }
  void validate() const;
};

Json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const Json& j);

// One training draw for the flow objective.
struct FlowSample {
  std::vector<double> a;    // target chunk, horizon * action_dim
  ImageU8 obs;              // RGB context frame
  double t = 0.0;           // timestep in [0, 1]
  std::vector<double> eps;  // standard normal, same size as a
};

// Velocity network abstraction: enumerable flat parameters and exact
// gradients. forward is pure; backward replays a taped forward, so batches
// can run concurrently with one tape per sample.
class VelocityModel {
 public:
  struct Tape {
    virtual ~Tape() = default;
  };

  virtual ~VelocityModel() = default;

  virtual std::string kind() const = 0;
  virtual int horizon() const = 0;
  virtual int action_dim() const = 0;
  virtual int obs_size() const = 0;

  virtual std::vector<double>& params() = 0;
  virtual const std::vector<double>& params() const = 0;
  std::size_t n_params() const { return params().size(); }

  // Predicts the velocity for one noisy chunk; out is resized to
  // horizon() * action_dim(). Records intermediates when tape_out is given.
  virtual void forward(const std::vector<double>& a_t, const ImageU8& obs, double t,
                       std::vector<double>& out,
                       std::unique_ptr<Tape>* tape_out = nullptr) const = 0;

  // Accumulates d(loss)/d(params) into grad (size n_params) given the
  // upstream gradient d(loss)/d(out) and the tape from the matching forward.
  virtual void backward(const Tape& tape, const std::vector<double>& g_out,
                        std::vector<double>& grad) const = 0;

  // Extended-precision forward for finite-difference checks: central
  // differences of a double-precision loss bottom out at the rounding floor
  // eps * loss / h, so grad_check evaluates through this path. The default
  // widens the double forward; concrete models override with real long
  // double arithmetic.
  virtual void forward_wide(const std::vector<double>& a_t, const ImageU8& obs, double t,
                            std::vector<long double>& out) const;
};

// Per-element linear map, linear in its parameters:
//   out[i] = w_a[i] * a_t[i] + w_t[i] * t + w_m[i] * mean_pixel + b[i].
// Gradient checks against it are exact up to floating-point noise.
class LinearVelocityModel final : public VelocityModel {
 public:
  LinearVelocityModel(int horizon, int action_dim, std::uint64_t seed);

  std::string kind() const override { return "linear"; }
  int horizon() const override { return horizon_; }
  int action_dim() const override { return action_dim_; }
  int obs_size() const override { return 0; }  // any raster accepted

  std::vector<double>& params() override { return theta_; }
  const std::vector<double>& params() const override { return theta_; }

  void forward(const std::vector<double>& a_t, const ImageU8& obs, double t,
               std::vector<double>& out,
               std::unique_ptr<Tape>* tape_out = nullptr) const override;
  void backward(const Tape& tape, const std::vector<double>& g_out,
                std::vector<double>& grad) const override;
  void forward_wide(const std::vector<double>& a_t, const ImageU8& obs, double t,
                    std::vector<long double>& out) const override;

 private:
  int horizon_, action_dim_;
  std::vector<double> theta_;
};

// Reference velocity network (~118k parameters, all double): a 3-layer
// strided conv encoder turns the obs raster into (obs_size/8)^2 tokens; the
// noisy chunk becomes one token per timestep (action row + sinusoidal time
// features); two blocks of self-attention, cross-attention to the obs
// tokens, and an MLP; a linear head decodes per-token velocities.
class AttentionVelocityModel final : public VelocityModel {
 public:
  AttentionVelocityModel(int horizon, int action_dim, int obs_size, std::uint64_t seed);

  std::string kind() const override { return "attention"; }
  int horizon() const override { return horizon_; }
  int action_dim() const override { return action_dim_; }
  int obs_size() const override { return obs_size_; }

  std::vector<double>& params() override { return theta_; }
  const std::vector<double>& params() const override { return theta_; }

  void forward(const std::vector<double>& a_t, const ImageU8& obs, double t,
               std::vector<double>& out,
               std::unique_ptr<Tape>* tape_out = nullptr) const override;
  void backward(const Tape& tape, const std::vector<double>& g_out,
                std::vector<double>& grad) const override;
  void forward_wide(const std::vector<double>& a_t, const ImageU8& obs, double t,
                    std::vector<long double>& out) const override;

 private:
  int horizon_, action_dim_, obs_size_;
  std::vector<double> theta_;
};

std::unique_ptr<VelocityModel> make_velocity_model(const std::string& kind, int horizon,
                                                   int action_dim, int obs_size,
                                                   std::uint64_t seed);

// Timestep draw: u ~ Beta(alpha, beta), t = 1 - shift * u, biasing mass
// toward small t. Defaults give mean 1 - 0.999 * 0.6.
double sample_timestep(Rng& rng, double alpha = 1.5, double beta = 1.0, double shift = 0.999);

// Linear noise path a_t = (1 - t) * eps + t * a.
std::vector<double> make_noisy(const std::vector<double>& a, const std::vector<double>& eps,
                               double t);

// Conditional flow-matching loss: mean over batch and elements of
// (model(a_t, obs, t) - (a - eps))^2.
double cfm_loss(const VelocityModel& model, const std::vector<FlowSample>& batch);

// Same loss, also accumulating d(loss)/d(params) into grad (resized and
// zeroed). Per-sample gradients reduce in batch order for any job count.
double cfm_loss_grad(const VelocityModel& model, const std::vector<FlowSample>& batch,
                     std::vector<double>& grad);

// Central-difference check of cfm_loss gradients over n_coords randomly
// chosen parameters; returns max |analytic - numeric| / max(|numeric|, 1e-8).
double grad_check(VelocityModel& model, const std::vector<FlowSample>& batch, double h,
                  int n_coords = 200, std::uint64_t seed = 1);

// Euler sampler: a ~ N(0, I), then k updates a += (1/k) * model(a, obs, i/k).
std::vector<double> euler_sample(const VelocityModel& model, const ImageU8& obs, int k,
                                 Rng& rng);

// ema <- decay * ema + (1 - decay) * params, elementwise.
void ema_update(std::vector<double>& ema, const std::vector<double>& params, double decay);

// Warmup-stable-decay schedule: linear 0 -> lr_peak over warmup_steps, flat
// for stable_steps, linear to 0 over decay_steps, 0 after.
double wsd_lr(int step, const TrainConfig& cfg);

// Color jitter (brightness, contrast, saturation, hue), rotation, random
// crop resized back to the input dimensions. Consumes a fixed number of rng
// draws regardless of config.
ImageU8 augment(const ImageU8& obs, Rng& rng, const AugmentConfig& cfg);

struct BcSample {
  ImageU8 obs;
  std::vector<double> chunk;  // horizon * action_dim, core encode_action rows
};

struct TrainLogEntry {
  int step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<double> ema_params;
  std::vector<TrainLogEntry> log;
  int steps = 0;
  double final_loss = 0.0;
};

// AdamW behavior cloning on (obs, chunk) pairs: per step, a uniformly drawn
// batch is augmented, noised per sample_timestep/make_noisy, and stepped
// with wsd_lr; EMA tracks the raw weights. The model ends at the raw final
// parameters; the EMA set is returned for evaluation. A non-finite loss
// aborts with the step number and last finite loss.
TrainResult train_bc(VelocityModel& model, const std::vector<BcSample>& data,
                     const TrainConfig& cfg, std::uint64_t seed);

void save_training_log(const std::string& path, const std::vector<TrainLogEntry>& log);
std::vector<TrainLogEntry> load_training_log(const std::string& path);

// Versioned JSON checkpoint: model identity, config, step, raw + EMA params.
struct Checkpoint {
  std::string model_kind = "attention";
  int horizon = 16;
  int action_dim = kActionDim;
  int obs_size = 64;
  int step = 0;
  TrainConfig config;
  std::vector<double> params;
  std::vector<double> ema_params;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

// Instantiates the checkpointed model with its raw or EMA weights.
std::unique_ptr<VelocityModel> model_from_checkpoint(const Checkpoint& ck, bool use_ema = true);

}  // namespace padtrack
