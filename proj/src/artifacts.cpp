#include "magik/artifacts.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>
#include <zlib.h>

namespace magik::artifacts {

namespace fs = std::filesystem;
using nlohmann::json;

std::string resolve_dir(const std::string& config_dir) {
  const char* env = std::getenv("MAGIK_ARTIFACT_DIR");
  if (env && *env) return env;
  return config_dir;
}

void ensure_dir(const std::string& dir) { fs::create_directories(dir); }

std::string join(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

bool file_exists(const std::string& path) {
  std::error_code ec;
  return fs::is_regular_file(path, ec);
}

std::string require(const std::string& dir, const std::string& name, const std::string& producer) {
  std::string path = join(dir, name);
  if (!file_exists(path))
    throw MissingArtifact("missing artifact '" + name + "' in " + dir + "; run " + producer +
                          " first");
  return path;
}

std::uint32_t crc32_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::uint32_t crc = ::crc32(0L, nullptr, 0);
  char buf[1 << 16];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
    crc = ::crc32(crc, reinterpret_cast<const Bytef*>(buf), static_cast<uInt>(in.gcount()));
  return crc;
}

Manifest Manifest::open(const std::string& dir) {
  Manifest m;
  m.dir_ = dir;
  std::ifstream in(join(dir, "manifest.json"), std::ios::binary);
  if (!in) return m;
  json j;
  try {
    in >> j;
  } catch (const json::parse_error&) {
    return m;  // a mangled manifest is treated as absent and rewritten
  }
  if (j.contains("config_hash") && j["config_hash"].is_string())
    m.config_hash_ = j["config_hash"].get<std::string>();
  if (j.contains("seed") && j["seed"].is_number_unsigned())
    m.seed_ = j["seed"].get<std::uint64_t>();
  if (j.contains("artifacts") && j["artifacts"].is_object()) {
    for (auto it = j["artifacts"].begin(); it != j["artifacts"].end(); ++it) {
      const json& e = it.value();
      Entry entry;
      if (e.contains("bytes")) entry.bytes = e["bytes"].get<std::uint64_t>();
      if (e.contains("crc32")) entry.crc32 = e["crc32"].get<std::uint32_t>();
      if (e.contains("producer")) entry.producer = e["producer"].get<std::string>();
      m.entries_[it.key()] = entry;
    }
  }
  return m;
}

void Manifest::stamp(const std::string& config_hash, std::uint64_t seed) {
  if (config_hash_ != config_hash || seed_ != seed) entries_.clear();
  config_hash_ = config_hash;
  seed_ = seed;
}

void Manifest::record(const std::string& name, const std::string& producer) {
  std::string path = join(dir_, name);
  Entry e;
  e.bytes = static_cast<std::uint64_t>(fs::file_size(path));
  e.crc32 = crc32_file(path);
  e.producer = producer;
  entries_[name] = e;
}

void Manifest::save() const {
  json j;
  j["schema_version"] = 1;
  j["config_hash"] = config_hash_;
  j["seed"] = seed_;
  json arts = json::object();
  for (const auto& [name, e] : entries_) {
    arts[name] = {{"bytes", e.bytes}, {"crc32", e.crc32}, {"producer", e.producer}};
  }
  j["artifacts"] = arts;
  std::ofstream out(join(dir_, "manifest.json"), std::ios::binary | std::ios::trunc);
  out << j.dump(2) << "\n";
}

const Manifest::Entry* Manifest::entry(const std::string& name) const {
  auto it = entries_.find(name);
  return it == entries_.end() ? nullptr : &it->second;
}

}  // namespace magik::artifacts
