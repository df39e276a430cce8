#include "magik/dataio.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <numeric>

#include "json.hpp"
#include "magik/rng.hpp"

namespace magik::dataio {

using nlohmann::json;

const char* io_error_name(IoError e) {
  switch (e) {
    case IoError::bad_magic: return "bad_magic";
    case IoError::version_mismatch: return "version_mismatch";
    case IoError::truncated: return "truncated";
    case IoError::checksum: return "checksum";
    case IoError::missing_section: return "missing_section";
    case IoError::bad_value: return "bad_value";
  }
  return "unknown";
}

namespace {

constexpr char kMagic[4] = {'M', 'G', 'I', 'K'};
constexpr std::size_t kNameBytes = 64;
constexpr std::size_t kEntryBytes = kNameBytes + 1 + 1 + 2 + 4 * 4 + 8 + 8 + 4 + 4;
constexpr std::uint8_t kKindArray = 0;
constexpr std::uint8_t kKindBytes = 1;

void put_u16(std::string& b, std::uint16_t v) {
  b.push_back(static_cast<char>(v & 0xff));
  b.push_back(static_cast<char>((v >> 8) & 0xff));
}
void put_u32(std::string& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint16_t get_u16(const char* p) {
  auto b = reinterpret_cast<const unsigned char*>(p);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}
std::uint32_t get_u32(const char* p) {
  auto b = reinterpret_cast<const unsigned char*>(p);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}
std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  auto b = reinterpret_cast<const unsigned char*>(p);
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

std::uint32_t crc_of(const void* data, std::size_t len) {
  // zlib's crc32 takes 32-bit chunk lengths; feed large buffers in pieces.
  auto p = static_cast<const Bytef*>(data);
  uLong crc = crc32(0L, Z_NULL, 0);
  while (len > 0) {
    uInt chunk = static_cast<uInt>(std::min<std::size_t>(len, 1u << 30));
    crc = crc32(crc, p, chunk);
    p += chunk;
    len -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

struct SectionRef {
  std::string name;
  std::uint8_t kind = 0;
  const void* data = nullptr;
  std::size_t bytes = 0;
  std::vector<int> dims;  // arrays only
};

void write_file(const std::string& path, const std::vector<SectionRef>& sections,
                std::uint8_t major, std::uint8_t minor) {
  for (const auto& s : sections) {
    if (s.name.empty() || s.name.size() >= kNameBytes)
      throw IoException(IoError::bad_value, "section name length out of range: '" + s.name + "'");
    if (s.dims.size() > 4)
      throw IoException(IoError::bad_value, "array rank > 4 unsupported: '" + s.name + "'");
  }

  std::string header;
  header.append(kMagic, 4);
  put_u16(header, static_cast<std::uint16_t>((major << 8) | minor));
  put_u16(header, 0);
  put_u32(header, static_cast<std::uint32_t>(sections.size()));

  std::size_t offset = header.size() + kEntryBytes * sections.size();
  std::string table;
  std::vector<std::size_t> offsets;
  for (const auto& s : sections) {
    offset = (offset + 7) & ~std::size_t{7};
    offsets.push_back(offset);

    char name[kNameBytes] = {};
    std::memcpy(name, s.name.data(), s.name.size());
    table.append(name, kNameBytes);
    table.push_back(static_cast<char>(s.kind));
    table.push_back(static_cast<char>(s.dims.size()));
    put_u16(table, 0);
    for (std::size_t d = 0; d < 4; ++d)
      put_u32(table, d < s.dims.size() ? static_cast<std::uint32_t>(s.dims[d]) : 0);
    put_u64(table, offset);
    put_u64(table, s.bytes);
    put_u32(table, crc_of(s.data, s.bytes));
    put_u32(table, 0);

    offset += s.bytes;
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoException(IoError::bad_value, "cannot open for writing: " + path);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(table.data(), static_cast<std::streamsize>(table.size()));
  std::size_t written = header.size() + table.size();
  for (std::size_t i = 0; i < sections.size(); ++i) {
    while (written < offsets[i]) {
      out.put('\0');
      ++written;
    }
    out.write(static_cast<const char*>(sections[i].data),
              static_cast<std::streamsize>(sections[i].bytes));
    written += sections[i].bytes;
  }
  if (!out) throw IoException(IoError::bad_value, "write failed: " + path);
}

}  // namespace

void Container::put_array(const std::string& name, Tensor t) { arrays_[name] = std::move(t); }
void Container::put_bytes(const std::string& name, std::string bytes) {
  bytes_[name] = std::move(bytes);
}

bool Container::has(const std::string& name) const {
  return arrays_.count(name) > 0 || bytes_.count(name) > 0;
}

const Tensor& Container::array(const std::string& name) const {
  auto it = arrays_.find(name);
  if (it == arrays_.end())
    throw IoException(IoError::missing_section, "missing array section '" + name + "'");
  return it->second;
}

const std::string& Container::bytes(const std::string& name) const {
  auto it = bytes_.find(name);
  if (it == bytes_.end())
    throw IoException(IoError::missing_section, "missing byte section '" + name + "'");
  return it->second;
}

std::vector<std::string> Container::names() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : arrays_) out.push_back(k);
  for (const auto& [k, v] : bytes_) out.push_back(k);
  std::sort(out.begin(), out.end());
  return out;
}

void Container::save(const std::string& path) const { save_with_version(path, kMajor, kMinor); }

void Container::save_with_version(const std::string& path, std::uint8_t major,
                                  std::uint8_t minor) const {
  // One merged, name-sorted section list so identical content always yields
  // identical bytes regardless of insertion order.
  std::vector<SectionRef> sections;
  for (const auto& [name, t] : arrays_) {
    SectionRef s;
    s.name = name;
    s.kind = kKindArray;
    s.data = t.data();
    s.bytes = static_cast<std::size_t>(t.size()) * sizeof(float);
    s.dims = t.shape();
    sections.push_back(std::move(s));
  }
  for (const auto& [name, b] : bytes_) {
    SectionRef s;
    s.name = name;
    s.kind = kKindBytes;
    s.data = b.data();
    s.bytes = b.size();
    sections.push_back(std::move(s));
  }
  std::sort(sections.begin(), sections.end(),
            [](const SectionRef& a, const SectionRef& b) { return a.name < b.name; });
  write_file(path, sections, major, minor);
}

Container Container::load(const std::string& path, bool* minor_warning) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoException(IoError::bad_value, "cannot open: " + path);
  std::string file((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (file.size() < 12) throw IoException(IoError::truncated, "file shorter than header: " + path);
  if (std::memcmp(file.data(), kMagic, 4) != 0)
    throw IoException(IoError::bad_magic, "not a MGIK file: " + path);

  std::uint16_t version = get_u16(file.data() + 4);
  std::uint8_t major = static_cast<std::uint8_t>(version >> 8);
  std::uint8_t minor = static_cast<std::uint8_t>(version & 0xff);
  if (major != kMajor)
    throw IoException(IoError::version_mismatch,
                      "incompatible major version " + std::to_string(major) + " (reader is " +
                          std::to_string(kMajor) + "): " + path);
  if (minor_warning) *minor_warning = (minor != kMinor);

  std::uint32_t count = get_u32(file.data() + 8);
  std::size_t table_end = 12 + kEntryBytes * static_cast<std::size_t>(count);
  if (table_end > file.size())
    throw IoException(IoError::truncated, "section table extends past end of file: " + path);

  Container c;
  for (std::uint32_t i = 0; i < count; ++i) {
    const char* e = file.data() + 12 + kEntryBytes * i;
    std::string name(e, strnlen(e, kNameBytes));
    std::uint8_t kind = static_cast<std::uint8_t>(e[kNameBytes]);
    std::uint8_t ndim = static_cast<std::uint8_t>(e[kNameBytes + 1]);
    std::vector<int> dims;
    for (std::uint8_t d = 0; d < ndim; ++d)
      dims.push_back(static_cast<int>(get_u32(e + kNameBytes + 4 + 4 * d)));
    std::uint64_t offset = get_u64(e + kNameBytes + 20);
    std::uint64_t length = get_u64(e + kNameBytes + 28);
    std::uint32_t crc = get_u32(e + kNameBytes + 36);

    if (ndim > 4 || (kind != kKindArray && kind != kKindBytes))
      throw IoException(IoError::bad_value, "corrupt section entry '" + name + "': " + path);
    if (offset + length > file.size() || offset < table_end)
      throw IoException(IoError::truncated, "section '" + name + "' extends past end of file");
    const char* payload = file.data() + offset;
    if (crc_of(payload, length) != crc)
      throw IoException(IoError::checksum, "checksum failure in section '" + name + "'");

    if (kind == kKindArray) {
      std::int64_t n = 1;
      for (int d : dims) n *= d;
      if (static_cast<std::uint64_t>(n) * sizeof(float) != length)
        throw IoException(IoError::bad_value, "array size mismatch in section '" + name + "'");
      Tensor t(dims);
      std::memcpy(t.data(), payload, length);
      c.put_array(name, std::move(t));
    } else {
      c.put_bytes(name, std::string(payload, length));
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// ObservationDataset
// ---------------------------------------------------------------------------

ObservationDataset ObservationDataset::pixel(std::vector<int> obs_shape) {
  ObservationDataset d;
  d.kind_ = envs::Observation::Kind::pixel;
  d.elements_ = Tensor::count(obs_shape);
  d.obs_shape_ = std::move(obs_shape);
  return d;
}

ObservationDataset ObservationDataset::feature(int dim) {
  ObservationDataset d;
  d.kind_ = envs::Observation::Kind::feature;
  d.obs_shape_ = {dim};
  d.elements_ = dim;
  return d;
}

void ObservationDataset::append(const envs::Observation& obs, int true_class, int episode_id) {
  if (obs.kind != kind_ || obs.data.shape() != obs_shape_)
    throw std::invalid_argument("observation does not match dataset shape");
  if (true_class < 1) throw std::invalid_argument("class labels are 1-based");
  if (kind_ == envs::Observation::Kind::pixel) {
    for (std::int64_t i = 0; i < elements_; ++i) {
      float v = std::clamp(obs.data.data()[i], 0.0f, 1.0f);
      u8_.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
    }
  } else {
    f32_.insert(f32_.end(), obs.data.data(), obs.data.data() + elements_);
  }
  classes_.push_back(true_class);
  episodes_.push_back(episode_id);
}

void ObservationDataset::get_into(std::size_t i, float* dst) const {
  const std::size_t n = static_cast<std::size_t>(elements_);
  if (kind_ == envs::Observation::Kind::pixel) {
    const std::uint8_t* src = u8_.data() + i * n;
    for (std::size_t k = 0; k < n; ++k) dst[k] = static_cast<float>(src[k]) / 255.0f;
  } else {
    std::memcpy(dst, f32_.data() + i * n, n * sizeof(float));
  }
}

envs::Observation ObservationDataset::get(std::size_t i) const {
  envs::Observation obs;
  obs.kind = kind_;
  obs.data = Tensor(obs_shape_);
  get_into(i, obs.data.data());
  return obs;
}

void ObservationDataset::save(const std::string& path) const {
  Container c;
  json meta = {
      {"schema", "dataset"},
      {"kind", kind_ == envs::Observation::Kind::pixel ? "pixel" : "feature"},
      {"obs_shape", obs_shape_},
      {"count", classes_.size()},
      {"env", env_id},
      {"task", task_id},
      {"policy", policy_tag},
      {"seed", collection_seed},
  };
  c.put_bytes("meta", meta.dump(2));
  if (kind_ == envs::Observation::Kind::pixel) {
    c.put_bytes("obs_u8", std::string(reinterpret_cast<const char*>(u8_.data()), u8_.size()));
  } else {
    std::vector<int> shape = obs_shape_;
    shape.insert(shape.begin(), static_cast<int>(classes_.size()));
    Tensor t(shape);
    std::copy(f32_.begin(), f32_.end(), t.data());
    c.put_array("obs_f32", std::move(t));
  }
  Tensor cls({static_cast<int>(classes_.size())});
  Tensor eps({static_cast<int>(episodes_.size())});
  for (std::size_t i = 0; i < classes_.size(); ++i) {
    cls.data()[i] = static_cast<float>(classes_[i]);
    eps.data()[i] = static_cast<float>(episodes_[i]);
  }
  c.put_array("classes", std::move(cls));
  c.put_array("episodes", std::move(eps));
  c.save(path);
}

ObservationDataset ObservationDataset::load(const std::string& path) {
  Container c = Container::load(path);
  json meta = json::parse(c.bytes("meta"));
  if (meta.value("schema", "") != "dataset")
    throw IoException(IoError::bad_value, "not a dataset file: " + path);

  ObservationDataset d;
  std::string kind = meta.at("kind");
  d.obs_shape_ = meta.at("obs_shape").get<std::vector<int>>();
  d.elements_ = Tensor::count(d.obs_shape_);
  d.env_id = meta.value("env", "");
  d.task_id = meta.value("task", "");
  d.policy_tag = meta.value("policy", "");
  d.collection_seed = meta.value("seed", std::uint64_t{0});
  std::size_t count = meta.at("count");

  if (kind == "pixel") {
    d.kind_ = envs::Observation::Kind::pixel;
    const std::string& raw = c.bytes("obs_u8");
    if (raw.size() != count * static_cast<std::size_t>(d.elements_))
      throw IoException(IoError::bad_value, "pixel block size mismatch: " + path);
    d.u8_.assign(raw.begin(), raw.end());
  } else if (kind == "feature") {
    d.kind_ = envs::Observation::Kind::feature;
    const Tensor& t = c.array("obs_f32");
    if (static_cast<std::size_t>(t.size()) != count * static_cast<std::size_t>(d.elements_))
      throw IoException(IoError::bad_value, "feature block size mismatch: " + path);
    d.f32_.assign(t.data(), t.data() + t.size());
  } else {
    throw IoException(IoError::bad_value, "unknown dataset kind '" + kind + "': " + path);
  }

  const Tensor& cls = c.array("classes");
  const Tensor& eps = c.array("episodes");
  if (static_cast<std::size_t>(cls.size()) != count ||
      static_cast<std::size_t>(eps.size()) != count)
    throw IoException(IoError::bad_value, "metadata column size mismatch: " + path);
  for (std::size_t i = 0; i < count; ++i) {
    d.classes_.push_back(static_cast<std::int32_t>(std::lround(cls.data()[i])));
    d.episodes_.push_back(static_cast<std::int32_t>(std::lround(eps.data()[i])));
  }
  return d;
}

void ObservationDataset::write_summary_csv(const std::string& path) const {
  CsvWriter csv(path, {"index", "class", "episode"});
  for (std::size_t i = 0; i < classes_.size(); ++i) {
    csv.row({std::to_string(i), std::to_string(classes_[i]), std::to_string(episodes_[i])});
  }
}

// ---------------------------------------------------------------------------
// Labeling
// ---------------------------------------------------------------------------

std::vector<LabeledSample> label_random_subset(const ObservationDataset& dataset,
                                               LabelBudget& budget, std::uint64_t seed) {
  if (budget.max_labels > dataset.size())
    throw std::invalid_argument("label budget (" + std::to_string(budget.max_labels) +
                                ") exceeds dataset size (" + std::to_string(dataset.size()) + ")");
  if (budget.spent > budget.max_labels) throw std::invalid_argument("label budget overspent");
  std::size_t want = budget.max_labels - budget.spent;

  // Partial Fisher-Yates: the first `want` entries are a uniform sample of
  // distinct indices.
  std::vector<std::size_t> idx(dataset.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = 0; i < want; ++i) {
    std::size_t j = i + static_cast<std::size_t>(rng.uniform_int(static_cast<int>(idx.size() - i)));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(want);
  std::sort(idx.begin(), idx.end());

  std::vector<LabeledSample> out;
  out.reserve(want);
  for (std::size_t i : idx) out.push_back({i, dataset.oracle_class(i)});
  budget.spent += want;
  return out;
}

void save_labels(const std::vector<LabeledSample>& labels, std::size_t dataset_size,
                 const std::string& path) {
  Container c;
  json meta = {{"schema", "labels"}, {"dataset_size", dataset_size}, {"count", labels.size()}};
  c.put_bytes("meta", meta.dump(2));
  Tensor idx({static_cast<int>(labels.size())});
  Tensor lab({static_cast<int>(labels.size())});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    idx.data()[i] = static_cast<float>(labels[i].index);
    lab.data()[i] = static_cast<float>(labels[i].label);
  }
  c.put_array("indices", std::move(idx));
  c.put_array("labels", std::move(lab));
  c.save(path);
}

std::vector<LabeledSample> load_labels(const std::string& path, std::size_t expect_dataset_size) {
  Container c = Container::load(path);
  json meta = json::parse(c.bytes("meta"));
  if (meta.value("schema", "") != "labels")
    throw IoException(IoError::bad_value, "not a labels file: " + path);
  if (meta.at("dataset_size").get<std::size_t>() != expect_dataset_size)
    throw IoException(IoError::bad_value,
                      "labels were drawn from a dataset of different size: " + path);
  const Tensor& idx = c.array("indices");
  const Tensor& lab = c.array("labels");
  std::vector<LabeledSample> out;
  for (std::int64_t i = 0; i < idx.size(); ++i) {
    LabeledSample s;
    s.index = static_cast<std::size_t>(std::llround(idx.data()[i]));
    s.label = static_cast<int>(std::lround(lab.data()[i]));
    if (s.index >= expect_dataset_size)
      throw IoException(IoError::bad_value, "label index out of range: " + path);
    out.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Collection
// ---------------------------------------------------------------------------

namespace {

std::string color_list(const std::vector<envs::Color>& cs) {
  std::string out;
  for (const auto& c : cs) {
    if (!out.empty()) out += "+";
    out += envs::color_name(c);
  }
  return out.empty() ? "none" : out;
}

}  // namespace

ObservationDataset collect_gridpick(envs::GridPickEnv& env, const GridPolicy& policy, int n_steps,
                                    std::uint64_t seed) {
  auto d = ObservationDataset::pixel({envs::GridPickEnv::kImageSize, envs::GridPickEnv::kImageSize, 3});
  d.env_id = "gridpick";
  d.task_id = "reward=" + color_list(env.config().task.rewarded);
  d.policy_tag = policy ? "policy" : "random";
  d.collection_seed = seed;

  Rng episode_rng(seed);
  Rng action_rng = episode_rng.split(1);
  int episode = 0;
  envs::Observation obs = env.reset(episode_rng.next_u64());
  for (int t = 0; t < n_steps; ++t) {
    d.append(obs, env.true_class(), episode);
    int a = policy ? policy(obs, action_rng) : action_rng.uniform_int(4);
    auto r = env.step(a);
    if (r.done) {
      ++episode;
      obs = env.reset(episode_rng.next_u64());
    } else {
      obs = std::move(r.obs);
    }
  }
  return d;
}

ObservationDataset collect_reacher(envs::ReacherEnv& env, const ReacherPolicy& policy, int n_steps,
                                   std::uint64_t seed) {
  auto d = ObservationDataset::feature(envs::ReacherEnv::kFeatureDim);
  d.env_id = "reacher";
  d.task_id = "reach=" + std::string(envs::color_name(env.config().task_color));
  d.policy_tag = policy ? "policy" : "random";
  d.collection_seed = seed;

  Rng episode_rng(seed);
  Rng action_rng = episode_rng.split(1);
  int episode = 0;
  envs::Observation obs = env.reset(episode_rng.next_u64());
  for (int t = 0; t < n_steps; ++t) {
    d.append(obs, env.true_class(), episode);
    std::array<float, 2> a;
    if (policy) {
      a = policy(obs, action_rng);
    } else {
      a = {static_cast<float>(action_rng.uniform(-1.0, 1.0)),
           static_cast<float>(action_rng.uniform(-1.0, 1.0))};
    }
    auto r = env.step(a);
    if (r.done) {
      ++episode;
      obs = env.reset(episode_rng.next_u64());
    } else {
      obs = std::move(r.obs);
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

CsvWriter::CsvWriter(const std::string& path, const std::vector<std::string>& header)
    : out_(path, std::ios::trunc), columns_(header.size()) {
  if (!out_) throw IoException(IoError::bad_value, "cannot open for writing: " + path);
  row(header);
}

void CsvWriter::row(const std::vector<std::string>& cells) {
  if (cells.size() != columns_) throw std::invalid_argument("csv row width mismatch");
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) out_ << ',';
    out_ << cells[i];
  }
  out_ << '\n';
  out_.flush();
}

std::string CsvWriter::num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

}  // namespace magik::dataio
