#include "magik/envs.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace magik::envs {

const char* color_name(Color c) {
  switch (c) {
    case Color::red: return "red";
    case Color::green: return "green";
    case Color::blue: return "blue";
    case Color::yellow: return "yellow";
  }
  return "?";
}

std::optional<Color> color_from_name(const std::string& name) {
  for (Color c : {Color::red, Color::green, Color::blue, Color::yellow})
    if (name == color_name(c)) return c;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// GridPick
// ---------------------------------------------------------------------------

namespace {

// Heading vectors: N, E, S, W in (row, col) space; row 0 is the top.
constexpr int kForward[4][2] = {{-1, 0}, {0, 1}, {1, 0}, {0, -1}};
constexpr int kRight[4][2] = {{0, 1}, {1, 0}, {0, -1}, {-1, 0}};

// Render palette.
constexpr float kFloor[3] = {0.15f, 0.15f, 0.15f};
constexpr float kVoid[3] = {0.0f, 0.0f, 0.0f};
constexpr float kRed[3] = {0.85f, 0.08f, 0.08f};
constexpr float kGreen[3] = {0.08f, 0.85f, 0.08f};

}  // namespace

GridPickEnv::GridPickEnv(Config cfg) : cfg_(std::move(cfg)), rng_(0) {
  if (cfg_.grid_size < GridPickEnv::kViewCells)
    throw std::invalid_argument("GridPickEnv: grid smaller than the view window");
  if (cfg_.task.rewarded.empty())
    throw std::invalid_argument("GridPickEnv: task must reward at least one color");
}

Observation GridPickEnv::reset(std::uint64_t seed) {
  rng_ = Rng(seed);
  steps_ = 0;
  done_ = false;
  picks_ = {};
  balls_.clear();
  // Distinct random cells for every ball and the agent.
  auto free_cell = [&](int& r, int& c) {
    for (;;) {
      r = static_cast<int>(rng_.uniform_int(static_cast<std::uint64_t>(cfg_.grid_size)));
      c = static_cast<int>(rng_.uniform_int(static_cast<std::uint64_t>(cfg_.grid_size)));
      bool clash = false;
      for (const Ball& b : balls_) clash = clash || (b.row == r && b.col == c);
      if (!clash) return;
    }
  };
  int r = 0, c = 0;
  if (cfg_.has_red) {
    free_cell(r, c);
    balls_.push_back({r, c, Color::red});
  }
  if (cfg_.has_green) {
    free_cell(r, c);
    balls_.push_back({r, c, Color::green});
  }
  free_cell(arow_, acol_);
  heading_ = static_cast<int>(rng_.uniform_int(4));
  return render();
}

bool GridPickEnv::in_bounds(int r, int c) const {
  return r >= 0 && r < cfg_.grid_size && c >= 0 && c < cfg_.grid_size;
}

const GridPickEnv::Ball* GridPickEnv::ball_at(int r, int c) const {
  for (const Ball& b : balls_)
    if (b.row == r && b.col == c) return &b;
  return nullptr;
}

void GridPickEnv::view_cell(int vr, int vc, int& r, int& c) const {
  int depth = (kViewCells - 1) - vr;  // 0 at the agent's row, 4 farthest
  int lateral = vc - kViewCells / 2;
  r = arow_ + kForward[heading_][0] * depth + kRight[heading_][0] * lateral;
  c = acol_ + kForward[heading_][1] * depth + kRight[heading_][1] * lateral;
}

StepResult GridPickEnv::step(int action) {
  if (action < 0 || action >= kNumActions)
    throw std::invalid_argument("GridPickEnv: action out of range");
  if (done_) throw std::logic_error("GridPickEnv: step() after episode end");
  float reward = 0.0f;
  switch (action) {
    case turn_left:
      heading_ = (heading_ + 3) % 4;
      break;
    case turn_right:
      heading_ = (heading_ + 1) % 4;
      break;
    case forward: {
      int nr = arow_ + kForward[heading_][0];
      int nc = acol_ + kForward[heading_][1];
      if (in_bounds(nr, nc) && ball_at(nr, nc) == nullptr) {
        arow_ = nr;
        acol_ = nc;
      }
      break;
    }
    case pickup: {
      int fr = arow_ + kForward[heading_][0];
      int fc = acol_ + kForward[heading_][1];
      const Ball* b = ball_at(fr, fc);
      if (b != nullptr) {
        Color col = b->color;
        picks_[static_cast<int>(col)]++;
        bool rewarded = std::find(cfg_.task.rewarded.begin(), cfg_.task.rewarded.end(), col) !=
                        cfg_.task.rewarded.end();
        if (rewarded) reward = cfg_.task.reward_per_pick;
        balls_.erase(std::find_if(balls_.begin(), balls_.end(), [&](const Ball& x) {
          return x.row == fr && x.col == fc;
        }));
        if (cfg_.task.terminal_on_completion) {
          bool all_collected = true;
          for (Color want : cfg_.task.rewarded)
            for (const Ball& rem : balls_)
              if (rem.color == want) all_collected = false;
          if (all_collected) done_ = true;
        }
      }
      break;
    }
  }
  ++steps_;
  if (steps_ >= cfg_.max_steps) done_ = true;
  return {render(), reward, done_};
}

void GridPickEnv::scan_view(bool& red_seen, bool& green_seen) const {
  red_seen = green_seen = false;
  for (int vr = 0; vr < kViewCells; ++vr)
    for (int vc = 0; vc < kViewCells; ++vc) {
      int r, c;
      view_cell(vr, vc, r, c);
      if (!in_bounds(r, c)) continue;
      const Ball* b = ball_at(r, c);
      if (b == nullptr) continue;
      if (b->color == Color::red) red_seen = true;
      if (b->color == Color::green) green_seen = true;
    }
}

int GridPickEnv::true_class() const {
  bool red = false, green = false;
  scan_view(red, green);
  if (red && !green) return 1;
  if (green && !red) return 2;
  if (red && green) return 3;
  return 4;
}

Observation GridPickEnv::render() const {
  Observation obs;
  obs.kind = Observation::Kind::pixel;
  obs.data.resize({kImageSize, kImageSize, 3});
  for (int vr = 0; vr < kViewCells; ++vr) {
    for (int vc = 0; vc < kViewCells; ++vc) {
      int r, c;
      view_cell(vr, vc, r, c);
      bool inside = in_bounds(r, c);
      const float* base = inside ? kFloor : kVoid;
      const Ball* b = inside ? ball_at(r, c) : nullptr;
      const float* ball_color = nullptr;
      if (b != nullptr) ball_color = (b->color == Color::red) ? kRed : kGreen;
      for (int py = 0; py < kCellPx; ++py) {
        for (int px = 0; px < kCellPx; ++px) {
          const float* col = base;
          if (ball_color != nullptr) {
            // Rasterize the ball as a filled circle of radius 3 px.
            float dy = static_cast<float>(py) - 3.5f;
            float dx = static_cast<float>(px) - 3.5f;
            if (dy * dy + dx * dx <= 9.0f) col = ball_color;
          }
          std::int64_t idx =
              ((static_cast<std::int64_t>(vr) * kCellPx + py) * kImageSize + vc * kCellPx + px) *
              3;
          obs.data[idx + 0] = col[0];
          obs.data[idx + 1] = col[1];
          obs.data[idx + 2] = col[2];
        }
      }
    }
  }
  return obs;
}

void GridPickEnv::set_state_for_testing(int row, int col, int heading, std::vector<Ball> balls) {
  arow_ = row;
  acol_ = col;
  heading_ = heading;
  balls_ = std::move(balls);
  done_ = false;
}

// ---------------------------------------------------------------------------
// Reacher
// ---------------------------------------------------------------------------

ReacherEnv::ReacherEnv() : ReacherEnv(Config()) {}

ReacherEnv::ReacherEnv(Config cfg) : cfg_(cfg), rng_(0) {
  if (cfg_.link1 <= 0.0f || cfg_.link2 <= 0.0f)
    throw std::invalid_argument("ReacherEnv: link lengths must be positive");
}

int ReacherEnv::quadrant(float x, float y) {
  if (x >= 0.0f && y >= 0.0f) return 0;
  if (x < 0.0f && y >= 0.0f) return 1;
  if (x < 0.0f && y < 0.0f) return 2;
  return 3;
}

Observation ReacherEnv::reset(std::uint64_t seed) {
  rng_ = Rng(seed);
  steps_ = 0;
  done_ = false;
  theta_[0] = static_cast<float>(rng_.uniform(-M_PI, M_PI));
  theta_[1] = static_cast<float>(rng_.uniform(-M_PI, M_PI));
  omega_[0] = omega_[1] = 0.0f;

  // One target per quadrant at a reachable radius, colors shuffled so that
  // color and workspace geometry are not confounded.
  float reach = cfg_.link1 + cfg_.link2;
  std::array<Color, 4> colors = {Color::red, Color::green, Color::blue, Color::yellow};
  for (int i = 3; i > 0; --i)
    std::swap(colors[static_cast<std::size_t>(i)],
              colors[rng_.uniform_int(static_cast<std::uint64_t>(i) + 1)]);
  for (int q = 0; q < 4; ++q) {
    float radius = static_cast<float>(rng_.uniform(0.4, 0.9)) * reach;
    float lo = static_cast<float>(q) * static_cast<float>(M_PI) / 2.0f + 0.15f;
    float hi = static_cast<float>(q + 1) * static_cast<float>(M_PI) / 2.0f - 0.15f;
    float ang = static_cast<float>(rng_.uniform(lo, hi));
    targets_[static_cast<std::size_t>(q)] = {radius * std::cos(ang), radius * std::sin(ang),
                                             colors[static_cast<std::size_t>(q)]};
  }
  return render();
}

std::array<float, 2> ReacherEnv::fingertip() const {
  float ex = cfg_.link1 * std::cos(theta_[0]);
  float ey = cfg_.link1 * std::sin(theta_[0]);
  return {ex + cfg_.link2 * std::cos(theta_[0] + theta_[1]),
          ey + cfg_.link2 * std::sin(theta_[0] + theta_[1])};
}

const ReacherEnv::Target& ReacherEnv::visible_target() const {
  auto tip = fingertip();
  return targets_[static_cast<std::size_t>(quadrant(tip[0], tip[1]))];
}

int ReacherEnv::true_class() const {
  return static_cast<int>(visible_target().color) + 1;
}

StepResult ReacherEnv::step(const std::array<float, 2>& torque) {
  if (done_) throw std::logic_error("ReacherEnv: step() after episode end");
  for (float t : torque)
    if (!(t >= -1.0f && t <= 1.0f))
      throw std::invalid_argument("ReacherEnv: torque outside [-1, 1]");
  for (int j = 0; j < 2; ++j) {
    theta_[j] += omega_[j] * cfg_.dt;
    omega_[j] += (torque[static_cast<std::size_t>(j)] - cfg_.damping * omega_[j]) * cfg_.dt;
    // Keep angles in [-pi, pi) so features stay in a canonical range.
    theta_[j] = std::remainder(theta_[j], 2.0f * static_cast<float>(M_PI));
  }
  ++steps_;
  float reward = 0.0f;
  auto tip = fingertip();
  for (const Target& t : targets_) {
    if (t.color != cfg_.task_color) continue;
    float dx = t.x - tip[0], dy = t.y - tip[1];
    if (std::sqrt(dx * dx + dy * dy) < cfg_.reach_threshold) {
      reward = 1.0f;
      done_ = true;
    }
  }
  if (steps_ >= cfg_.max_steps) done_ = true;
  return {render(), reward, done_};
}

Observation ReacherEnv::render() const {
  Observation obs;
  obs.kind = Observation::Kind::feature;
  obs.data.resize({kFeatureDim});
  auto tip = fingertip();
  const Target& vis = visible_target();
  float* f = obs.data.data();
  f[0] = std::cos(theta_[0]);
  f[1] = std::sin(theta_[0]);
  f[2] = std::cos(theta_[1]);
  f[3] = std::sin(theta_[1]);
  f[4] = omega_[0];
  f[5] = omega_[1];
  f[6] = tip[0];
  f[7] = tip[1];
  f[8] = vis.x;
  f[9] = vis.y;
  f[10] = f[11] = f[12] = f[13] = 0.0f;
  f[10 + static_cast<int>(vis.color)] = 1.0f;
  f[14] = vis.x - tip[0];
  f[15] = vis.y - tip[1];
  // Planar arm embedded in 3-D: the out-of-plane delta component is
  // identically zero but kept so the vector is 17-dimensional.
  f[16] = 0.0f;
  return obs;
}

void ReacherEnv::set_state_for_testing(const std::array<float, 2>& theta,
                                       const std::array<float, 2>& omega,
                                       const std::array<Target, 4>& targets) {
  theta_[0] = theta[0];
  theta_[1] = theta[1];
  omega_[0] = omega[0];
  omega_[1] = omega[1];
  targets_ = targets;
  done_ = false;
}

}  // namespace magik::envs
