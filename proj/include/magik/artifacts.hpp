#pragma once

// The artifact directory: one flat directory per experiment holding every
// file the pipeline reads or writes, plus a manifest recording the config
// hash, master seed, and a checksum per artifact — enough to re-derive any
// run. Commands locate their inputs here and complain, by producing
// command, when an upstream stage has not run yet.

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace magik::artifacts {

/// A downstream command asked for a file an upstream command has not
/// produced; the message says which command to run.
class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Resolution order: the MAGIK_ARTIFACT_DIR environment variable when set
/// and nonempty, else the config's paths block.
std::string resolve_dir(const std::string& config_dir);

/// Creates the directory (parents included) if needed.
void ensure_dir(const std::string& dir);

std::string join(const std::string& dir, const std::string& name);
bool file_exists(const std::string& path);

/// Full path of `name`, or MissingArtifact telling the user to run
/// `producer` first.
std::string require(const std::string& dir, const std::string& name, const std::string& producer);

/// CRC32 (zlib polynomial) of a file's bytes; throws std::runtime_error when
/// unreadable.
std::uint32_t crc32_file(const std::string& path);

/// manifest.json: {"config_hash", "seed", "schema_version", "artifacts":
/// {name: {"bytes", "crc32", "producer"}}}. Content is fully determined by
/// the recorded runs — no clocks — so identical pipelines write identical
/// manifests.
class Manifest {
 public:
  struct Entry {
    std::uint64_t bytes = 0;
    std::uint32_t crc32 = 0;
    std::string producer;
  };

  /// Loads dir/manifest.json when present, else starts empty.
  static Manifest open(const std::string& dir);

  /// Stamps the run identity; a changed hash or seed clears recorded
  /// entries (artifacts of another configuration do not vouch for this one).
  void stamp(const std::string& config_hash, std::uint64_t seed);

  /// Checksums the named file (which must exist in the directory) and
  /// records it under `producer`.
  void record(const std::string& name, const std::string& producer);

  void save() const;

  const std::string& dir() const { return dir_; }
  const std::string& config_hash() const { return config_hash_; }
  std::uint64_t seed() const { return seed_; }
  const std::map<std::string, Entry>& entries() const { return entries_; }
  const Entry* entry(const std::string& name) const;

 private:
  std::string dir_;
  std::string config_hash_;
  std::uint64_t seed_ = 0;
  std::map<std::string, Entry> entries_;
};

}  // namespace magik::artifacts
