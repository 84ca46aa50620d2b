#include "padtrack/harness.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "padtrack/numio.hpp"
#include "padtrack/rng.hpp"

namespace padtrack {

namespace {

// Motion constants in world units (player width 0.6) and units/s. Jump
// clearance: apex is jump^2 / (2 g) = 2.82, enough for any procedural
// platform top (max 2.2 plus the 0.45 half-height).
constexpr double kPlayerHalfW = 0.3;
constexpr double kPlayerHalfH = 0.45;
constexpr double kGravity = 30.0;
constexpr double kRunSpeed = 6.0;
constexpr double kJumpSpeed = 13.0;
constexpr double kStickDeadzone = 0.25;
constexpr double kWorldWidth = 24.0;

// View window of the camera: 12.8 world units tall, y in [-2.4, 10.4].
constexpr double kViewUnits = 12.8;
constexpr double kViewTop = 10.4;

bool overlaps(double px, double py, const Rect& r) {
  return px + kPlayerHalfW > r.x0 && px - kPlayerHalfW < r.x1 && py + kPlayerHalfH > r.y0 &&
         py - kPlayerHalfH < r.y1;
}

bool rect_eq(const Rect& a, const Rect& b) {
  return a.x0 == b.x0 && a.y0 == b.y0 && a.x1 == b.x1 && a.y1 == b.y1;
}

// The raised block the player must mount, or null on a degenerate level.
const Rect* raised_block(const ToyGameState& s) {
  const Rect* best = nullptr;
  for (const Rect& r : s.platforms)
    if (r.y1 > 0.0 && (!best || r.x0 < best->x0)) best = &r;
  return best;
}

ToyGameState make_initial_state(const EnvConfig& cfg, std::uint64_t seed) {
  ToyGameState st;
  if (cfg.mode == "procedural") {
    const std::uint64_t geo = derive_seed(cfg.level_seed, seed, hash_string("toy-level"));
    Rng g(geo);
    const double px = 12.0 + 4.0 * g.uniform();
    const double top = 1.2 + 1.0 * g.uniform();
    st.platforms = {{0.0, -1.0, kWorldWidth, 0.0}, {px, -1.0, px + 4.0, top}};
    st.goal = {px + 2.4, top, px + 3.6, top + 1.7};
    st.rng_state = geo;
  } else {
    st.platforms = {{0.0, -1.0, kWorldWidth, 0.0}, {16.0, -1.0, 20.0, 1.5}};
    st.goal = {18.5, 1.5, 19.8, 3.2};
    st.rng_state = 0;
  }
  Rng sp(derive_seed(cfg.level_seed, seed, hash_string("toy-spawn")));
  st.x = 2.0 + 8.0 * sp.uniform();
  st.y = kPlayerHalfH;
  st.grounded = true;
  return st;
}

}  // namespace

bool ToyGameState::operator==(const ToyGameState& o) const {
  if (x != o.x || y != o.y || vx != o.vx || vy != o.vy || grounded != o.grounded ||
      goal_reached != o.goal_reached || rng_state != o.rng_state || tick != o.tick)
    return false;
  if (platforms.size() != o.platforms.size()) return false;
  for (std::size_t i = 0; i < platforms.size(); ++i)
    if (!rect_eq(platforms[i], o.platforms[i])) return false;
  return rect_eq(goal, o.goal);
}

std::uint64_t state_hash(const ToyGameState& s) {
  std::string buf;
  buf.reserve(64 + 32 * s.platforms.size());
  const auto put_u64 = [&buf](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf += static_cast<char>((v >> (8 * i)) & 0xff);
  };
  const auto put_d = [&put_u64](double d) { put_u64(std::bit_cast<std::uint64_t>(d)); };
  put_d(s.x);
  put_d(s.y);
  put_d(s.vx);
  put_d(s.vy);
  buf += static_cast<char>(s.grounded);
  buf += static_cast<char>(s.goal_reached);
  put_u64(s.rng_state);
  put_u64(s.platforms.size());
  for (const Rect& r : s.platforms) {
    put_d(r.x0);
    put_d(r.y0);
    put_d(r.x1);
    put_d(r.y1);
  }
  put_d(s.goal.x0);
  put_d(s.goal.y0);
  put_d(s.goal.x1);
  put_d(s.goal.y1);
  return hash_string(buf);
}

ToyGameState toy_step(const ToyGameState& s, const ActionFrame& action, double step_dt) {
  if (!action.valid()) throw ValidationError("action frame has stick value outside [-1, 1]");
  if (!(step_dt > 0.0) || !std::isfinite(step_dt))
    throw ValidationError("step_dt must be positive");
  ToyGameState n = s;

  const double lx = std::abs(action.sticks[0]) > kStickDeadzone ? action.sticks[0] : 0.0;
  n.vx = kRunSpeed * lx;
  if (action.buttons[kFaceA] && n.grounded) n.vy = kJumpSpeed;
  n.vy -= kGravity * step_dt;

  // Axis-separated resolution; speeds stay far below geometry thickness per
  // frame, so pushing back to the face the player entered through is exact.
  n.x += n.vx * step_dt;
  for (const Rect& r : n.platforms) {
    if (n.vx == 0.0 || !overlaps(n.x, n.y, r)) continue;
    n.x = n.vx > 0.0 ? r.x0 - kPlayerHalfW : r.x1 + kPlayerHalfW;
  }
  n.x = std::clamp(n.x, kPlayerHalfW, kWorldWidth - kPlayerHalfW);

  n.y += n.vy * step_dt;
  n.grounded = false;
  for (const Rect& r : n.platforms) {
    if (!overlaps(n.x, n.y, r)) continue;
    if (n.vy <= 0.0) {
      n.y = r.y1 + kPlayerHalfH;
      n.vy = 0.0;
      n.grounded = true;
    } else {
      n.y = r.y0 - kPlayerHalfH;
      n.vy = 0.0;
    }
  }

  if (!n.goal_reached && overlaps(n.x, n.y, n.goal)) n.goal_reached = true;
  n.tick = s.tick + 1;
  return n;
}

ImageU8 render_state(const ToyGameState& s, int resolution) {
  if (resolution < 8) throw ValidationError("render resolution must be at least 8");
  const double scale = resolution / kViewUnits;
  const double half = kViewUnits / 2.0;
  const double cam_x = std::clamp(s.x, half, kWorldWidth - half);

  ImageU8 img(resolution, resolution, 3);
  for (int py = 0; py < resolution; ++py) {
    const double wy = kViewTop - (py + 0.5) / scale;
    std::uint8_t* row = img.row(py);
    for (int px = 0; px < resolution; ++px) {
      const double wx = cam_x + (px + 0.5 - resolution / 2.0) / scale;
      std::uint8_t r = 120, g = 180, b = 235;  // sky
      for (const Rect& p : s.platforms) {
        if (!p.contains(wx, wy)) continue;
        r = 95, g = 70, b = 50;
        break;
      }
      if (s.goal.contains(wx, wy)) r = 250, g = 210, b = 60;
      if (wx > s.x - kPlayerHalfW && wx < s.x + kPlayerHalfW && wy > s.y - kPlayerHalfH &&
          wy < s.y + kPlayerHalfH)
        r = 230, g = 60, b = 50;
      row[3 * px] = r;
      row[3 * px + 1] = g;
      row[3 * px + 2] = b;
    }
  }
  return img;
}

void EnvConfig::validate() const {
  if (resolution < 16 || resolution % 8 != 0)
    throw ConfigError("resolution must be a multiple of 8, at least 16");
  if (mode != "fixed" && mode != "procedural")
    throw ConfigError("mode must be 'fixed' or 'procedural', got '" + mode + "'");
  if (tick_limit < 1) throw ConfigError("tick_limit must be at least 1");
}

Json EnvConfig::to_json() const {
  return Json{{"resolution", resolution},
              {"mode", mode},
              {"level_seed", level_seed},
              {"tick_limit", tick_limit}};
}

EnvConfig EnvConfig::from_json(const Json& j) {
  EnvConfig cfg;
  try {
    cfg.resolution = j.value("resolution", cfg.resolution);
    cfg.mode = j.value("mode", cfg.mode);
    cfg.level_seed = j.value("level_seed", cfg.level_seed);
    cfg.tick_limit = j.value("tick_limit", cfg.tick_limit);
  } catch (const Json::exception& e) {
    throw FormatError(std::string("bad env config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

ToyEnv::ToyEnv(const EnvConfig& cfg) : cfg_(cfg) { cfg_.validate(); }

std::pair<ImageU8, std::uint64_t> ToyEnv::reset(std::uint64_t seed) {
  state_ = make_initial_state(cfg_, seed);
  clock_ = VirtualClock{};
  started_ = true;
  return {render_state(state_, cfg_.resolution), state_hash(state_)};
}

ToyEnv::StepResult ToyEnv::step(const ActionFrame& action) {
  if (!started_) throw ProtocolError("step called before reset");
  if (done()) throw ProtocolError("step called on a done episode");
  const bool had_goal = state_.goal_reached;
  state_ = toy_step(state_, action, clock_.step_dt);
  clock_.advance();
  StepResult res;
  res.reward = state_.goal_reached && !had_goal ? 1.0 : 0.0;
  res.done = done();
  res.obs = render_state(state_, cfg_.resolution);
  return res;
}

bool ToyEnv::done() const {
  return started_ && (state_.goal_reached || state_.tick >= cfg_.tick_limit);
}

void PauseSchedule::validate(int n_steps) const {
  int prev = -1;
  for (const PauseEvent& e : events) {
    if (e.frame < 0 || e.frame >= n_steps)
      throw ValidationError("pause frame " + std::to_string(e.frame) + " outside [0, " +
                            std::to_string(n_steps) + ")");
    if (e.frame <= prev) throw ValidationError("pause frames must be strictly increasing");
    if (e.millis < 0) throw ValidationError("pause duration must be non-negative");
    prev = e.frame;
  }
}

PauseSchedule random_pause_schedule(int n_steps, int n_pauses, int min_ms, int max_ms,
                                    std::uint64_t seed) {
  if (n_steps < 1) throw ValidationError("n_steps must be at least 1");
  if (n_pauses < 0 || n_pauses > n_steps)
    throw ValidationError("n_pauses must be in [0, n_steps]");
  if (min_ms < 0 || max_ms < min_ms) throw ValidationError("bad pause duration range");
  Rng rng(seed);
  std::set<int> frames;
  while (static_cast<int>(frames.size()) < n_pauses)
    frames.insert(static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(n_steps))));
  PauseSchedule sched;
  sched.events.reserve(frames.size());
  for (int f : frames) sched.events.push_back({f, rng.uniform_int(min_ms, max_ms)});
  return sched;
}

Rollout record_rollout(const EnvConfig& cfg, const PolicyFn& policy, int n_steps,
                       std::uint64_t seed) {
  if (!policy) throw ValidationError("record_rollout needs a policy");
  if (n_steps < 1) throw ValidationError("n_steps must be at least 1");
  ToyEnv env(cfg);
  Rollout out;
  ImageU8 obs = env.reset(seed).first;
  for (int i = 0; i < n_steps && !env.done(); ++i) {
    const ActionFrame a = policy(obs, env.state());
    out.observations.push_back(std::move(obs));
    ToyEnv::StepResult res = env.step(a);
    out.actions.push_back(a);
    out.hashes.push_back(state_hash(env.state()));
    out.total_reward += res.reward;
    obs = std::move(res.obs);
  }
  out.success = env.state().goal_reached;
  return out;
}

Rollout record_rollout(const EnvConfig& cfg, const std::vector<ActionFrame>& actions,
                       std::uint64_t seed) {
  if (actions.empty()) throw ValidationError("record_rollout needs at least one action");
  std::size_t i = 0;
  const PolicyFn replay = [&actions, &i](const ImageU8&, const ToyGameState&) {
    return actions[i++];
  };
  return record_rollout(cfg, replay, static_cast<int>(actions.size()), seed);
}

std::vector<std::uint64_t> replay_with_pauses(const EnvConfig& cfg,
                                              const std::vector<ActionFrame>& actions,
                                              std::uint64_t seed, const PauseSchedule& schedule) {
  if (actions.empty()) throw ValidationError("replay needs at least one action");
  schedule.validate(static_cast<int>(actions.size()));
  ToyEnv env(cfg);
  env.reset(seed);
  std::vector<std::uint64_t> hashes;
  hashes.reserve(actions.size());
  std::size_t next = 0;
  for (std::size_t i = 0; i < actions.size() && !env.done(); ++i) {
    if (next < schedule.events.size() &&
        schedule.events[next].frame == static_cast<int>(i)) {
      // Wall-clock sleep only; the virtual clock advances inside step.
      std::this_thread::sleep_for(std::chrono::milliseconds(schedule.events[next].millis));
      ++next;
    }
    env.step(actions[i]);
    hashes.push_back(state_hash(env.state()));
  }
  return hashes;
}

std::optional<int> first_divergence(const std::vector<std::uint64_t>& a,
                                    const std::vector<std::uint64_t>& b) {
  if (a.size() != b.size())
    throw DimensionError("trajectory lengths differ: " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return static_cast<int>(i);
  return std::nullopt;
}

ActionFrame oracle_action(const ToyGameState& s) {
  ActionFrame a;
  a.sticks[0] = 1.0;
  const Rect* block = raised_block(s);
  // Any grounded takeoff in this window clears the block face and lands on
  // top; the window end also covers standing flush against the face.
  if (block && s.grounded && s.x >= block->x0 - 2.5 && s.x <= block->x0 - 0.05)
    a.buttons[kFaceA] = true;
  return a;
}

std::vector<BcSample> collect_oracle_chunks(const EnvConfig& cfg, int n_pairs, int horizon,
                                            std::uint64_t seed) {
  if (n_pairs < 1) throw ValidationError("n_pairs must be at least 1");
  if (horizon < 1) throw ValidationError("horizon must be at least 1");
  std::vector<BcSample> out;
  out.reserve(static_cast<std::size_t>(n_pairs));
  const std::vector<double> idle = encode_action(ActionFrame{});
  for (std::uint64_t ep = 0; static_cast<int>(out.size()) < n_pairs; ++ep) {
    ToyEnv env(cfg);
    ImageU8 obs = env.reset(derive_seed(seed, ep, hash_string("oracle-episode"))).first;
    // Scripted approach prefix on most episodes: drive right at a varied
    // speed for a varied time before the oracle takes over. Decision states
    // then cover off-phase positions and the stuck-at-face case, which pure
    // oracle runs never visit but an imperfect clone must recover from.
    Rng pre(derive_seed(seed, ep, hash_string("oracle-prefix")));
    if (pre.bernoulli(0.67)) {
      const int ticks = std::min(pre.uniform_int(8, 160), cfg.tick_limit - 1);
      ActionFrame drive;
      drive.sticks[0] = pre.uniform(0.4, 1.0);
      for (int i = 0; i < ticks && !env.done(); ++i) obs = env.step(drive).obs;
    }
    while (!env.done() && static_cast<int>(out.size()) < n_pairs) {
      BcSample sample;
      sample.obs = obs;
      sample.chunk.reserve(static_cast<std::size_t>(horizon) * kActionDim);
      for (int t = 0; t < horizon; ++t) {
        if (env.done()) {
          sample.chunk.insert(sample.chunk.end(), idle.begin(), idle.end());
          continue;
        }
        const ActionFrame a = oracle_action(env.state());
        ToyEnv::StepResult res = env.step(a);
        const std::vector<double> row = encode_action(a);
        sample.chunk.insert(sample.chunk.end(), row.begin(), row.end());
        obs = std::move(res.obs);
      }
      out.push_back(std::move(sample));
    }
  }
  return out;
}

namespace {

RolloutStats run_episodes(const EnvConfig& cfg, int n_episodes, std::uint64_t seed,
                          const std::function<PolicyFn(int episode)>& make_policy) {
  if (n_episodes < 1) throw ValidationError("n_episodes must be at least 1");
  RolloutStats stats;
  stats.episodes.reserve(static_cast<std::size_t>(n_episodes));
  int wins = 0;
  for (int e = 0; e < n_episodes; ++e) {
    Rollout r = record_rollout(cfg, make_policy(e), cfg.tick_limit,
                               derive_seed(seed, static_cast<std::uint64_t>(e),
                                           hash_string("episode")));
    r.observations.clear();
    r.observations.shrink_to_fit();
    wins += r.success ? 1 : 0;
    stats.episodes.push_back(std::move(r));
  }
  stats.success_rate = static_cast<double>(wins) / n_episodes;
  return stats;
}

}  // namespace

RolloutStats rollout_scripted(const EnvConfig& cfg, const PolicyFn& policy, int n_episodes,
                              std::uint64_t seed) {
  if (!policy) throw ValidationError("rollout_scripted needs a policy");
  return run_episodes(cfg, n_episodes, seed, [&policy](int) { return policy; });
}

RolloutStats rollout_random(const EnvConfig& cfg, int n_episodes, std::uint64_t seed) {
  return run_episodes(cfg, n_episodes, seed, [seed](int e) {
    auto rng = std::make_shared<Rng>(
        derive_seed(seed, static_cast<std::uint64_t>(e), hash_string("random-policy")));
    return PolicyFn([rng](const ImageU8&, const ToyGameState&) {
      ActionFrame a;
      for (int b = 0; b < kNumButtons; ++b) a.buttons[b] = rng->bernoulli(0.5);
      for (int s = 0; s < kNumAxes; ++s) a.sticks[s] = rng->uniform(-1.0, 1.0);
      return a;
    });
  });
}

RolloutStats rollout_policy(const Checkpoint& ck, const EnvConfig& cfg, int n_episodes,
                            std::uint64_t seed, bool use_ema) {
  if (n_episodes < 1) throw ValidationError("n_episodes must be at least 1");
  cfg.validate();
  const std::unique_ptr<VelocityModel> model = model_from_checkpoint(ck, use_ema);
  if (model->obs_size() != cfg.resolution)
    throw DimensionError("checkpoint expects " + std::to_string(model->obs_size()) +
                         "px observations, env renders " + std::to_string(cfg.resolution));
  if (model->action_dim() != kActionDim)
    throw DimensionError("checkpoint action dim " + std::to_string(model->action_dim()) +
                         " does not match the core encoding " + std::to_string(kActionDim));
  const int horizon = model->horizon();
  RolloutStats stats;
  stats.episodes.reserve(static_cast<std::size_t>(n_episodes));
  int wins = 0;
  for (int e = 0; e < n_episodes; ++e) {
    ToyEnv env(cfg);
    ImageU8 obs = env.reset(derive_seed(seed, static_cast<std::uint64_t>(e),
                                        hash_string("episode")))
                      .first;
    Rng srng(derive_seed(seed, static_cast<std::uint64_t>(e), hash_string("sample")));
    Rollout r;
    while (!env.done()) {
      const std::vector<double> chunk = euler_sample(*model, obs, ck.config.k_inference, srng);
      for (int t = 0; t < horizon && !env.done(); ++t) {
        const std::vector<double> row(chunk.begin() + t * kActionDim,
                                      chunk.begin() + (t + 1) * kActionDim);
        const ActionFrame a = decode_action(row);
        ToyEnv::StepResult res = env.step(a);
        r.actions.push_back(a);
        r.hashes.push_back(state_hash(env.state()));
        r.total_reward += res.reward;
        obs = std::move(res.obs);
      }
    }
    r.success = env.state().goal_reached;
    wins += r.success ? 1 : 0;
    stats.episodes.push_back(std::move(r));
  }
  stats.success_rate = static_cast<double>(wins) / n_episodes;
  return stats;
}

namespace {

std::string hash_hex(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) s[i] = digits[h & 0xf];
  return s;
}

std::uint64_t parse_hash_hex(const std::string& tok, std::size_t line_no,
                             const std::string& path) {
  if (tok.size() != 16)
    throw FormatError(path + ":" + std::to_string(line_no) + ": expected 16 hex digits, got '" +
                      tok + "'");
  std::uint64_t v = 0;
  const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v, 16);
  if (res.ec != std::errc{} || res.ptr != tok.data() + tok.size())
    throw FormatError(path + ":" + std::to_string(line_no) + ": bad state hash '" + tok + "'");
  return v;
}

}  // namespace

void write_trajectory(const Rollout& r, const std::string& path) {
  if (r.actions.size() != r.hashes.size())
    throw DimensionError("rollout has " + std::to_string(r.actions.size()) + " actions but " +
                         std::to_string(r.hashes.size()) + " hashes");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "PADTRACK trajectory v1 " << r.actions.size() << "\n";
  for (std::size_t i = 0; i < r.actions.size(); ++i) {
    std::string line = std::to_string(i + 1);
    line += ' ';
    for (bool b : r.actions[i].buttons) line += b ? '1' : '0';
    for (double s : r.actions[i].sticks) {
      line += ' ';
      line += format_double(s);
    }
    line += ' ';
    line += hash_hex(r.hashes[i]);
    out << line << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

Rollout read_trajectory(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path + ": empty file, missing header");
  std::istringstream hss(line);
  std::string magic, kind, version;
  std::size_t n = 0;
  if (!(hss >> magic >> kind >> version >> n) || magic != "PADTRACK" || kind != "trajectory" ||
      version != "v1")
    throw FormatError(path + ":1: missing or malformed PADTRACK trajectory v1 header");
  Rollout r;
  r.actions.reserve(n);
  r.hashes.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t line_no = i + 2;
    if (!std::getline(in, line))
      throw FormatError(path + ": expected " + std::to_string(n) + " records, got " +
                        std::to_string(i));
    std::istringstream iss(line);
    std::vector<std::string> toks;
    std::string tok;
    while (iss >> tok) toks.push_back(tok);
    if (toks.size() != 2 + kNumAxes + 1)
      throw FormatError(path + ":" + std::to_string(line_no) + ": expected " +
                        std::to_string(2 + kNumAxes + 1) + " fields, got " +
                        std::to_string(toks.size()));
    if (parse_long(toks[0]) != static_cast<long>(i + 1))
      throw FormatError(path + ":" + std::to_string(line_no) + ": non-sequential tick");
    ActionFrame a;
    if (toks[1].size() != kNumButtons)
      throw FormatError(path + ":" + std::to_string(line_no) + ": expected " +
                        std::to_string(kNumButtons) + " button flags");
    for (int b = 0; b < kNumButtons; ++b) {
      if (toks[1][b] != '0' && toks[1][b] != '1')
        throw FormatError(path + ":" + std::to_string(line_no) + ": button flags must be 0 or 1");
      a.buttons[b] = toks[1][b] == '1';
    }
    for (int s = 0; s < kNumAxes; ++s) a.sticks[s] = parse_double(toks[2 + s]);
    if (!a.valid())
      throw FormatError(path + ":" + std::to_string(line_no) + ": stick outside [-1, 1]");
    r.actions.push_back(a);
    r.hashes.push_back(parse_hash_hex(toks[2 + kNumAxes], line_no, path));
  }
  return r;
}

}  // namespace padtrack
