#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "padtrack/action.hpp"
#include "padtrack/geometry.hpp"
#include "padtrack/image.hpp"
#include "padtrack/jsonio.hpp"
#include "padtrack/policy.hpp"

namespace padtrack {

// Simulated time for the frame-stepped environment. Physics reads time only
// through step_dt, and now moves only via advance(), so wall-clock delays
// between frames cannot leak into the simulation.
struct VirtualClock {
  double now = 0.0;
  double step_dt = 1.0 / 60.0;

  void advance() { now += step_dt; }
};

// Full simulation state of the toy platformer. Evolution is a pure function
// of (state, action, step_dt); see toy_step. Distances are in world units
// (the player is 0.6 wide), y grows upward.
struct ToyGameState {
  double x = 0.0, y = 0.0;    // player center
  double vx = 0.0, vy = 0.0;  // player velocity, units/s
  bool grounded = false;
  bool goal_reached = false;      // latched on first goal entry
  std::uint64_t rng_state = 0;    // geometry seed of the procedural variant
  int tick = 0;
  std::vector<Rect> platforms;    // solid rectangles, floor included
  Rect goal;                      // reward region

  bool operator==(const ToyGameState& o) const;
};

// Hash of the canonical state serialization (exact double bits, geometry,
// flags). The tick counter is excluded so that dynamical fixed points hash
// identically; trajectory records carry the tick alongside the hash.
std::uint64_t state_hash(const ToyGameState& s);

// Single physics frame: stick-driven horizontal velocity (deadzone 0.25),
// jump on grounded A press, gravity, then axis-separated AABB collision
// against the platforms. Pure; never reads any clock.
ToyGameState toy_step(const ToyGameState& s, const ActionFrame& action, double step_dt);

// Deterministic rasterization of a state at the given square resolution,
// camera centered on the player. Equal states produce equal image bytes.
ImageU8 render_state(const ToyGameState& s, int resolution);

// Environment configuration; round-trips through JSON.
struct EnvConfig {
  int resolution = 64;           // square RGB observations; 256 also supported
  std::string mode = "fixed";    // "fixed" or "procedural" level geometry
  std::uint64_t level_seed = 0;  // procedural family selector
  int tick_limit = 900;

  void validate() const;
  Json to_json() const;
  static EnvConfig from_json(const Json& j);
};

// Frame-stepped environment around toy_step: run right, jump onto the raised
// platform, touch the goal. reset(seed) is deterministic per seed; in fixed
// mode the seed varies only the spawn point, in procedural mode it also
// draws the level geometry. step advances the virtual clock by exactly
// step_dt, pays reward 1 on first goal entry, and reports done on goal or
// tick limit. One instance is single-threaded.
class ToyEnv {
 public:
  explicit ToyEnv(const EnvConfig& cfg = {});

  struct StepResult {
    ImageU8 obs;
    double reward = 0.0;
    bool done = false;
  };

  std::pair<ImageU8, std::uint64_t> reset(std::uint64_t seed);
  // Throws ProtocolError when called before reset or on a done episode.
  StepResult step(const ActionFrame& action);

  bool done() const;
  const ToyGameState& state() const { return state_; }
  const VirtualClock& clock() const { return clock_; }
  const EnvConfig& config() const { return cfg_; }

 private:
  EnvConfig cfg_;
  VirtualClock clock_;
  ToyGameState state_;
  bool started_ = false;
};

// Wall-clock pauses injected before scheduled frames during replay.
struct PauseEvent {
  int frame = 0;   // step index the pause precedes
  int millis = 0;  // wall-clock sleep duration
};

struct PauseSchedule {
  std::vector<PauseEvent> events;

  // Frames strictly increasing and inside [0, n_steps), waits >= 0.
  void validate(int n_steps) const;
};

// n_pauses distinct frames drawn from [0, n_steps) with waits uniform in
// [min_ms, max_ms], sorted by frame.
PauseSchedule random_pause_schedule(int n_steps, int n_pauses, int min_ms, int max_ms,
                                    std::uint64_t seed);

// One recorded episode: the action executed at each step, the state hash
// after it, and the observation the policy saw before it.
struct Rollout {
  std::vector<ActionFrame> actions;
  std::vector<std::uint64_t> hashes;
  std::vector<ImageU8> observations;
  double total_reward = 0.0;
  bool success = false;
};

using PolicyFn = std::function<ActionFrame(const ImageU8& obs, const ToyGameState& state)>;

// Runs the policy from reset(seed) for n_steps frames, stopping early at
// done. n_steps must be >= 1.
Rollout record_rollout(const EnvConfig& cfg, const PolicyFn& policy, int n_steps,
                       std::uint64_t seed);

// Replays a recorded action list from the same reset seed.
Rollout record_rollout(const EnvConfig& cfg, const std::vector<ActionFrame>& actions,
                       std::uint64_t seed);

// Replay that sleeps the scheduled wall-clock duration before each listed
// frame without touching the virtual clock. An empty schedule is a plain
// replay; the returned hashes match record_rollout bit for bit.
std::vector<std::uint64_t> replay_with_pauses(const EnvConfig& cfg,
                                              const std::vector<ActionFrame>& actions,
                                              std::uint64_t seed, const PauseSchedule& schedule);

// Smallest index where the hash trajectories differ, or nullopt when they
// agree everywhere. Lengths must match.
std::optional<int> first_divergence(const std::vector<std::uint64_t>& a,
                                    const std::vector<std::uint64_t>& b);

// Scripted expert for the shipped task: hold lx = 1 and jump once the
// platform's leading edge is in range. Succeeds from any spawn in either
// layout mode.
ActionFrame oracle_action(const ToyGameState& s);

// (observation, action chunk) pairs harvested from oracle episodes at every
// chunk boundary. Chunks are encode_action rows of length horizon, padded
// with the null action past episode end. Reset seeds vary per episode, and
// most episodes open with a scripted approach prefix (not recorded) so the
// decision states also cover late, off-phase, and stuck-at-face positions.
std::vector<BcSample> collect_oracle_chunks(const EnvConfig& cfg, int n_pairs, int horizon,
                                            std::uint64_t seed);

// Aggregate evaluation result. Episode observations are dropped to keep
// memory bounded; actions and hashes are kept.
struct RolloutStats {
  double success_rate = 0.0;
  std::vector<Rollout> episodes;
};

// Success rate of a scripted policy over n_episodes fresh-seeded episodes.
RolloutStats rollout_scripted(const EnvConfig& cfg, const PolicyFn& policy, int n_episodes,
                              std::uint64_t seed);

// Success rate of a uniform-random policy (buttons fair coins, sticks
// uniform in [-1, 1], drawn per frame).
RolloutStats rollout_random(const EnvConfig& cfg, int n_episodes, std::uint64_t seed);

// Flow-policy evaluation: at every chunk boundary euler_sample draws one
// action chunk from the checkpointed model, which is executed open-loop for
// horizon frames before re-observing. Checkpoint dimensions must match the
// configured observation resolution and the core action encoding.
RolloutStats rollout_policy(const Checkpoint& ck, const EnvConfig& cfg, int n_episodes,
                            std::uint64_t seed, bool use_ema = true);

// Line-delimited trajectory format:
//   header  PADTRACK trajectory v1 <n_steps>
//   record  <tick> <16 chars of 0/1> <4 reals> <16 hex digits>
// Observations are not stored; read_trajectory restores actions and hashes.
void write_trajectory(const Rollout& r, const std::string& path);
Rollout read_trajectory(const std::string& path);

}  // namespace padtrack
