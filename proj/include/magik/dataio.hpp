#pragma once

// Persistence: a single-file sectioned container ("MGIK") for arrays and
// metadata with per-section CRC32, plus the observation dataset captured
// during source training and the budgeted labeling oracle.

#include <array>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "magik/envs.hpp"
#include "magik/tensor.hpp"

namespace magik::dataio {

enum class IoError {
  bad_magic,
  version_mismatch,
  truncated,
  checksum,
  missing_section,
  bad_value,
};

const char* io_error_name(IoError e);

class IoException : public std::runtime_error {
 public:
  IoException(IoError code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  IoError code() const { return code_; }

 private:
  IoError code_;
};

/// Sectioned binary container. Layout: magic "MGIK", version u16
/// (major byte, minor byte), section table, 8-byte-aligned payloads, CRC32
/// per section. Array sections are contiguous little-endian f32 with up to
/// 4 recorded dimensions; byte sections are opaque (JSON metadata, u8 pixel
/// blocks). Readers accept any file whose major version matches; a smaller
/// on-disk minor version is accepted with a warning flag.
class Container {
 public:
  static constexpr std::uint8_t kMajor = 1;
  static constexpr std::uint8_t kMinor = 1;

  void put_array(const std::string& name, Tensor t);
  void put_bytes(const std::string& name, std::string bytes);

  bool has(const std::string& name) const;
  /// Throws IoException(missing_section) when absent.
  const Tensor& array(const std::string& name) const;
  const std::string& bytes(const std::string& name) const;
  std::vector<std::string> names() const;

  void save(const std::string& path) const;
  /// minor_warning (optional) is set when the file was written by an older
  /// minor version of the writer.
  static Container load(const std::string& path, bool* minor_warning = nullptr);

  /// Writes a file stamped with an arbitrary version; used by compatibility
  /// fixtures and tests. Content handling is identical to save().
  void save_with_version(const std::string& path, std::uint8_t major, std::uint8_t minor) const;

 private:
  std::map<std::string, Tensor> arrays_;
  std::map<std::string, std::string> bytes_;
};

// ---------------------------------------------------------------------------
// Observation dataset
// ---------------------------------------------------------------------------

/// Observations visited during source training (or scripted collection),
/// with the ground-truth class and episode id stored per record at
/// collection time. Ground truth is only "revealed" through the budgeted
/// labeler below; training code receives just the revealed subset.
///
/// Pixel observations are stored quantized to u8 (value = round(255 x)),
/// which cuts memory/disk 4x; get() dequantizes to u8/255. Feature
/// observations are stored as raw f32 and round-trip bitwise.
class ObservationDataset {
 public:
  static ObservationDataset pixel(std::vector<int> obs_shape);
  static ObservationDataset feature(int dim);

  void append(const envs::Observation& obs, int true_class, int episode_id);
  std::size_t size() const { return classes_.size(); }
  envs::Observation get(std::size_t i) const;
  /// Writes one dequantized observation into dst (obs_elements() floats).
  void get_into(std::size_t i, float* dst) const;
  std::int64_t obs_elements() const { return elements_; }
  const std::vector<int>& obs_shape() const { return obs_shape_; }
  envs::Observation::Kind kind() const { return kind_; }

  /// Ground-truth oracle. Reserved for the labeler, evaluation diagnostics,
  /// and tests — trainer code paths must not touch it.
  int oracle_class(std::size_t i) const { return classes_[i]; }
  int episode_id(std::size_t i) const { return episodes_[i]; }

  std::string env_id, task_id, policy_tag;
  std::uint64_t collection_seed = 0;

  void save(const std::string& path) const;
  static ObservationDataset load(const std::string& path);
  /// CSV dump: index, class, episode columns.
  void write_summary_csv(const std::string& path) const;

  /// Direct record access for size-conscious consumers (u8 pixels).
  const std::vector<std::uint8_t>& pixel_store() const { return u8_; }
  const std::vector<float>& feature_store() const { return f32_; }

 private:
  envs::Observation::Kind kind_ = envs::Observation::Kind::pixel;
  std::vector<int> obs_shape_;
  std::int64_t elements_ = 0;
  std::vector<std::uint8_t> u8_;
  std::vector<float> f32_;
  std::vector<std::int32_t> classes_;
  std::vector<std::int32_t> episodes_;
};

// ---------------------------------------------------------------------------
// Labeling under a budget
// ---------------------------------------------------------------------------

struct LabeledSample {
  std::size_t index = 0;
  int label = 0;  // 1-based class
};

struct LabelBudget {
  std::size_t max_labels = 0;
  std::size_t spent = 0;
};

/// Uniformly samples max_labels distinct indices and reveals their stored
/// ground-truth classes. Refuses a budget larger than the dataset.
std::vector<LabeledSample> label_random_subset(const ObservationDataset& dataset,
                                               LabelBudget& budget, std::uint64_t seed);

void save_labels(const std::vector<LabeledSample>& labels, std::size_t dataset_size,
                 const std::string& path);
std::vector<LabeledSample> load_labels(const std::string& path, std::size_t expect_dataset_size);

// ---------------------------------------------------------------------------
// Collection
// ---------------------------------------------------------------------------

using GridPolicy = std::function<int(const envs::Observation&, Rng&)>;
using ReacherPolicy = std::function<std::array<float, 2>(const envs::Observation&, Rng&)>;

/// Rolls the policy for n_steps environment steps (episodes reset as they
/// end), recording the observation the policy acted on, its ground-truth
/// class, and the episode id. Passing a null policy means uniform random.
ObservationDataset collect_gridpick(envs::GridPickEnv& env, const GridPolicy& policy,
                                    int n_steps, std::uint64_t seed);
ObservationDataset collect_reacher(envs::ReacherEnv& env, const ReacherPolicy& policy,
                                   int n_steps, std::uint64_t seed);

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// Minimal CSV emitter: header row + numeric/string cells, '\n' rows,
/// flushed per row so partial curves survive an aborted run.
class CsvWriter {
 public:
  explicit CsvWriter(const std::string& path, const std::vector<std::string>& header);
  void row(const std::vector<std::string>& cells);
  static std::string num(double v);

 private:
  std::ofstream out_;
  std::size_t columns_;
};

}  // namespace magik::dataio
