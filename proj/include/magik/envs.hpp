#pragma once

// The two benchmark environments, written from scratch with deterministic
// seeded dynamics. GridPick emits 40x40x3 egocentric pixel observations;
// Reacher emits a 17-dim feature vector. Both expose a ground-truth class
// oracle (true_class) used by the simulated human labeler.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "magik/rng.hpp"
#include "magik/tensor.hpp"

namespace magik::envs {

enum class Color : int { red = 0, green = 1, blue = 2, yellow = 3 };

/// Both environments partition observations into four ground-truth classes.
inline constexpr int kNumClasses = 4;

const char* color_name(Color c);
std::optional<Color> color_from_name(const std::string& name);

/// Reward definition: +reward_per_pick whenever a rewarded-color object is
/// picked/reached; episode ends early once every rewarded color is collected
/// (GridPick) or the rewarded target is reached (Reacher).
struct TaskSpec {
  std::vector<Color> rewarded;
  float reward_per_pick = 1.0f;
  bool terminal_on_completion = true;
};

struct Observation {
  enum class Kind { pixel, feature };
  Kind kind = Kind::pixel;
  Tensor data;  // pixel: [40, 40, 3] in [0,1]; feature: [17]
};

struct StepResult {
  Observation obs;
  float reward = 0.0f;
  bool done = false;
};

// ---------------------------------------------------------------------------
// GridPick
// ---------------------------------------------------------------------------

/// 8x8 room with up to one red and one green ball. The agent turns, moves,
/// and picks up the ball directly ahead. Observations are egocentric: a
/// 5x5-cell window ahead of the agent rasterized at 8 px/cell to 40x40x3.
///
/// Observation classes (ground truth for the labeler):
///   1 = only red in view, 2 = only green, 3 = both, 4 = neither.
class GridPickEnv {
 public:
  enum Action : int { turn_left = 0, turn_right = 1, forward = 2, pickup = 3 };
  static constexpr int kNumActions = 4;
  static constexpr int kViewCells = 5;
  static constexpr int kCellPx = 8;
  static constexpr int kImageSize = kViewCells * kCellPx;  // 40

  struct Config {
    int grid_size = 8;
    int max_steps = 20;
    bool has_red = true;
    bool has_green = true;
    TaskSpec task;  // defaults to the source task (green rewarded)
    Config() { task.rewarded = {Color::green}; }
  };

  struct Ball {
    int row = 0, col = 0;
    Color color = Color::red;
  };

  explicit GridPickEnv(Config cfg = Config());

  Observation reset(std::uint64_t seed);
  StepResult step(int action);
  /// Ground-truth class of the current view; see class table above.
  int true_class() const;

  int steps_elapsed() const { return steps_; }
  const Config& config() const { return cfg_; }
  int agent_row() const { return arow_; }
  int agent_col() const { return acol_; }
  int heading() const { return heading_; }  // 0=N 1=E 2=S 3=W
  const std::vector<Ball>& balls() const { return balls_; }
  /// Number of rewarded-color balls picked so far this episode, by color.
  int picks(Color c) const { return picks_[static_cast<int>(c)]; }

  /// Test/fixture hook: overwrite the full state. Counters are preserved.
  void set_state_for_testing(int row, int col, int heading, std::vector<Ball> balls);

  Observation render() const;

 private:
  bool in_bounds(int r, int c) const;
  const Ball* ball_at(int r, int c) const;
  /// World cell shown at view coordinates (vr, vc); vr=4 is the agent's row,
  /// vr=0 the farthest row ahead; vc=2 is straight ahead.
  void view_cell(int vr, int vc, int& r, int& c) const;
  void scan_view(bool& red_seen, bool& green_seen) const;

  Config cfg_;
  Rng rng_;
  int arow_ = 0, acol_ = 0, heading_ = 0;
  std::vector<Ball> balls_;
  int steps_ = 0;
  bool done_ = false;
  std::array<int, 4> picks_{};
};

// ---------------------------------------------------------------------------
// Reacher
// ---------------------------------------------------------------------------

/// Two-link planar arm under torque control with linear joint damping:
///   theta += omega * dt;  omega += (torque - damping * omega) * dt.
/// Four colored targets sit one per workspace quadrant, colors shuffled
/// across quadrants at every reset. The observation exposes only the target
/// in the fingertip's quadrant.
///
/// Feature vector (17): cos t1, sin t1, cos t2, sin t2, w1, w2,
/// fingertip xy, visible-target xy, color one-hot(4), delta xyz (z == 0:
/// planar arm embedded in 3-D, keeping the vector at 17 dims).
class ReacherEnv {
 public:
  static constexpr int kFeatureDim = 17;
  static constexpr int kActionDim = 2;

  struct Config {
    float link1 = 0.1f;
    float link2 = 0.1f;
    float dt = 0.05f;
    float damping = 0.1f;
    float reach_threshold = 0.05f;
    int max_steps = 150;
    Color task_color = Color::blue;
  };

  struct Target {
    float x = 0.0f, y = 0.0f;
    Color color = Color::red;
  };

  ReacherEnv();
  explicit ReacherEnv(Config cfg);

  Observation reset(std::uint64_t seed);
  StepResult step(const std::array<float, 2>& torque);
  /// 1-based class = visible target color index (red=1, green=2, blue=3, yellow=4).
  int true_class() const;

  std::array<float, 2> fingertip() const;
  const std::array<Target, 4>& targets() const { return targets_; }
  const Target& visible_target() const;
  int steps_elapsed() const { return steps_; }
  const Config& config() const { return cfg_; }
  std::array<float, 2> joint_angles() const { return {theta_[0], theta_[1]}; }
  std::array<float, 2> joint_velocities() const { return {omega_[0], omega_[1]}; }

  void set_state_for_testing(const std::array<float, 2>& theta,
                             const std::array<float, 2>& omega,
                             const std::array<Target, 4>& targets);

  Observation render() const;

 private:
  /// Quadrant of (x, y) with axis points resolved by >= 0 convention, so a
  /// target is always visible. 0=(+,+) 1=(-,+) 2=(-,-) 3=(+,-).
  static int quadrant(float x, float y);

  Config cfg_;
  Rng rng_;
  float theta_[2] = {0.0f, 0.0f};
  float omega_[2] = {0.0f, 0.0f};
  std::array<Target, 4> targets_;  // indexed by quadrant
  int steps_ = 0;
  bool done_ = false;
};

}  // namespace magik::envs
