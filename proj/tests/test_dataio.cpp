#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>

#include "magik/dataio.hpp"
#include "magik/envs.hpp"
#include "magik/rng.hpp"

using namespace magik;
using namespace magik::dataio;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void dump(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string tmp_path(const char* name) { return std::string("./") + name; }

Tensor random_tensor(std::vector<int> shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i)
    t.data()[i] = static_cast<float>(rng.normal());
  return t;
}

IoError error_code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const IoException& e) {
    return e.code();
  }
  FAIL("expected an IoException");
  return IoError::bad_value;
}

}  // namespace

TEST_CASE("container round-trips arrays and bytes bitwise") {
  Rng rng(77);
  Container c;
  Tensor a = random_tensor({3, 5}, rng);
  Tensor b = random_tensor({2, 4, 4, 3}, rng);
  Tensor s = random_tensor({7}, rng);
  c.put_array("alpha", a);
  c.put_array("bravo/nested.name", b);
  c.put_array("scalar7", s);
  std::string blob = "{\"k\": 1}";
  blob.push_back('\0');  // byte sections are opaque: embedded NULs must survive
  blob.push_back('\x01');
  blob += " raw bytes allowed";
  c.put_bytes("meta", blob);

  auto path = tmp_path("t_roundtrip.mgik");
  c.save(path);
  bool warn = true;
  Container r = Container::load(path, &warn);
  CHECK_FALSE(warn);

  REQUIRE(r.has("alpha"));
  REQUIRE(r.has("bravo/nested.name"));
  CHECK(r.array("alpha").shape() == std::vector<int>{3, 5});
  CHECK(r.array("bravo/nested.name").shape() == std::vector<int>{2, 4, 4, 3});
  CHECK(std::memcmp(r.array("alpha").data(), a.data(), sizeof(float) * a.size()) == 0);
  CHECK(std::memcmp(r.array("bravo/nested.name").data(), b.data(), sizeof(float) * b.size()) == 0);
  CHECK(std::memcmp(r.array("scalar7").data(), s.data(), sizeof(float) * s.size()) == 0);
  CHECK(r.bytes("meta") == blob);
  CHECK(r.names() == std::vector<std::string>{"alpha", "bravo/nested.name", "meta", "scalar7"});
  std::remove(path.c_str());
}

TEST_CASE("identical content produces identical files regardless of insertion order") {
  Rng rng(78);
  Tensor a = random_tensor({4, 4}, rng);
  Tensor b = random_tensor({9}, rng);

  Container c1;
  c1.put_array("a", a);
  c1.put_array("b", b);
  c1.put_bytes("m", "hello");
  Container c2;
  c2.put_bytes("m", "hello");
  c2.put_array("b", b);
  c2.put_array("a", a);

  auto p1 = tmp_path("t_det1.mgik"), p2 = tmp_path("t_det2.mgik");
  c1.save(p1);
  c2.save(p2);
  CHECK(slurp(p1) == slurp(p2));
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("reader rejects foreign files, truncation, and corruption with distinct codes") {
  Rng rng(79);
  Container c;
  c.put_array("payload", random_tensor({16}, rng));
  c.put_bytes("note", "0123456789abcdef");
  auto path = tmp_path("t_corrupt.mgik");
  c.save(path);
  std::string good = slurp(path);

  SUBCASE("wrong magic") {
    std::string bad = good;
    bad[0] = 'X';
    dump(path, bad);
    CHECK(error_code_of([&] { Container::load(path); }) == IoError::bad_magic);
  }
  SUBCASE("empty file") {
    dump(path, "");
    CHECK(error_code_of([&] { Container::load(path); }) == IoError::truncated);
  }
  SUBCASE("payload cut off") {
    dump(path, good.substr(0, good.size() - 5));
    CHECK(error_code_of([&] { Container::load(path); }) == IoError::truncated);
  }
  SUBCASE("flipped payload byte fails its section checksum") {
    std::string bad = good;
    bad[bad.size() - 3] = static_cast<char>(bad[bad.size() - 3] ^ 0x40);
    dump(path, bad);
    CHECK(error_code_of([&] { Container::load(path); }) == IoError::checksum);
  }
  SUBCASE("missing section surfaces by name") {
    Container r = Container::load(path);
    CHECK(error_code_of([&] { r.array("absent"); }) == IoError::missing_section);
    CHECK(error_code_of([&] { r.bytes("absent"); }) == IoError::missing_section);
  }
  std::remove(path.c_str());
}

TEST_CASE("version policy: older minor loads with a warning, foreign major is an error") {
  Container c;
  Tensor t({3});
  t.data()[0] = 1.0f;
  t.data()[1] = 2.0f;
  t.data()[2] = 3.0f;
  c.put_array("x", t);
  auto path = tmp_path("t_version.mgik");

  // Fixture written by the previous-minor writer: same layout, older stamp.
  c.save_with_version(path, Container::kMajor, 0);
  bool warn = false;
  Container r = Container::load(path, &warn);
  CHECK(warn);
  CHECK(r.array("x").data()[2] == 3.0f);

  c.save_with_version(path, Container::kMajor + 1, 0);
  CHECK(error_code_of([&] { Container::load(path); }) == IoError::version_mismatch);
  std::remove(path.c_str());
}

TEST_CASE("pixel datasets quantize to u8 and round-trip bitwise through disk") {
  envs::GridPickEnv env;
  auto d = collect_gridpick(env, nullptr, 120, 2024);
  REQUIRE(d.size() == 120);
  CHECK(d.kind() == envs::Observation::Kind::pixel);
  CHECK(d.env_id == "gridpick");
  CHECK(d.task_id == "reward=green");
  CHECK(d.policy_tag == "random");

  // Stored u8 must reproduce rendered pixels to within half a quantization
  // step after dequantization.
  envs::GridPickEnv env2;
  Rng episode_rng(2024);
  (void)episode_rng.split(1);  // collection derives its action stream first
  envs::Observation first = env2.reset(episode_rng.next_u64());
  envs::Observation got = d.get(0);
  for (std::int64_t i = 0; i < first.data.size(); ++i) {
    CHECK(std::abs(first.data.data()[i] - got.data.data()[i]) <= 0.5f / 255.0f + 1e-7f);
  }

  auto path = tmp_path("t_grid.mgik");
  d.save(path);
  auto r = ObservationDataset::load(path);
  REQUIRE(r.size() == d.size());
  CHECK(r.pixel_store() == d.pixel_store());
  CHECK(r.env_id == d.env_id);
  CHECK(r.task_id == d.task_id);
  CHECK(r.collection_seed == d.collection_seed);
  for (std::size_t i = 0; i < r.size(); ++i) {
    CHECK(r.oracle_class(i) == d.oracle_class(i));
    CHECK(r.episode_id(i) == d.episode_id(i));
  }
  std::remove(path.c_str());
}

TEST_CASE("feature datasets round-trip bitwise through disk") {
  envs::ReacherEnv env;
  auto d = collect_reacher(env, nullptr, 200, 515);
  REQUIRE(d.size() == 200);
  CHECK(d.kind() == envs::Observation::Kind::feature);
  CHECK(d.task_id == "reach=blue");

  auto path = tmp_path("t_reach.mgik");
  d.save(path);
  auto r = ObservationDataset::load(path);
  REQUIRE(r.size() == 200);
  CHECK(std::memcmp(r.feature_store().data(), d.feature_store().data(),
                    d.feature_store().size() * sizeof(float)) == 0);
  for (std::size_t i = 0; i < r.size(); ++i) CHECK(r.oracle_class(i) == d.oracle_class(i));
  std::remove(path.c_str());
}

TEST_CASE("collection is deterministic in the seed and episode ids are well-formed") {
  envs::GridPickEnv e1, e2, e3;
  auto a = collect_gridpick(e1, nullptr, 150, 99);
  auto b = collect_gridpick(e2, nullptr, 150, 99);
  auto c = collect_gridpick(e3, nullptr, 150, 100);
  CHECK(a.pixel_store() == b.pixel_store());
  CHECK(a.pixel_store() != c.pixel_store());

  int prev = 0;
  int run = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    int ep = a.episode_id(i);
    CHECK(ep >= prev);
    CHECK(ep <= prev + 1);
    run = (ep == prev) ? run + 1 : 1;
    CHECK(run <= e1.config().max_steps);
    prev = ep;
  }
  CHECK(a.episode_id(0) == 0);
  CHECK(prev >= 1);  // a random policy cannot stretch 150 steps into one 20-step episode
}

TEST_CASE("a long random roll in the two-ball room visits all four view classes") {
  envs::GridPickEnv env;
  auto d = collect_gridpick(env, nullptr, 4000, 7);
  std::set<int> seen;
  for (std::size_t i = 0; i < d.size(); ++i) seen.insert(d.oracle_class(i));
  CHECK(seen == std::set<int>{1, 2, 3, 4});
}

TEST_CASE("labeler draws a distinct uniform subset and charges the budget") {
  envs::ReacherEnv env;
  auto d = collect_reacher(env, nullptr, 500, 11);

  LabelBudget budget{50, 0};
  auto labels = label_random_subset(d, budget, 31337);
  CHECK(budget.spent == 50);
  REQUIRE(labels.size() == 50);
  std::set<std::size_t> idx;
  for (const auto& s : labels) {
    CHECK(s.index < d.size());
    CHECK(s.label == d.oracle_class(s.index));
    idx.insert(s.index);
  }
  CHECK(idx.size() == 50);  // distinct
  for (std::size_t i = 1; i < labels.size(); ++i) CHECK(labels[i - 1].index < labels[i].index);

  // Exhausted budget yields nothing further.
  auto again = label_random_subset(d, budget, 31337);
  CHECK(again.empty());
  CHECK(budget.spent == 50);

  // Same seed, fresh budget: identical draw. Different seed: different draw.
  LabelBudget b2{50, 0};
  auto same = label_random_subset(d, b2, 31337);
  REQUIRE(same.size() == labels.size());
  bool all_equal = true;
  for (std::size_t i = 0; i < same.size(); ++i) all_equal &= (same[i].index == labels[i].index);
  CHECK(all_equal);
  LabelBudget b3{50, 0};
  auto other = label_random_subset(d, b3, 999);
  bool any_diff = false;
  for (std::size_t i = 0; i < other.size(); ++i) any_diff |= (other[i].index != labels[i].index);
  CHECK(any_diff);

  LabelBudget too_big{d.size() + 1, 0};
  CHECK_THROWS_AS(label_random_subset(d, too_big, 1), std::invalid_argument);
}

TEST_CASE("label files round-trip and refuse a mismatched dataset") {
  envs::ReacherEnv env;
  auto d = collect_reacher(env, nullptr, 300, 12);
  LabelBudget budget{40, 0};
  auto labels = label_random_subset(d, budget, 5);

  auto path = tmp_path("t_labels.mgik");
  save_labels(labels, d.size(), path);
  auto r = load_labels(path, d.size());
  REQUIRE(r.size() == labels.size());
  for (std::size_t i = 0; i < r.size(); ++i) {
    CHECK(r[i].index == labels[i].index);
    CHECK(r[i].label == labels[i].label);
  }
  CHECK(error_code_of([&] { load_labels(path, d.size() + 1); }) == IoError::bad_value);
  std::remove(path.c_str());
}

TEST_CASE("summary csv lists index, class, and episode per record") {
  envs::GridPickEnv env;
  auto d = collect_gridpick(env, nullptr, 25, 3);
  auto path = tmp_path("t_summary.csv");
  d.write_summary_csv(path);

  std::ifstream in(path);
  std::string line;
  REQUIRE(std::getline(in, line));
  CHECK(line == "index,class,episode");
  std::size_t rows = 0;
  std::string row5;
  while (std::getline(in, line)) {
    if (rows == 5) row5 = line;
    ++rows;
  }
  CHECK(rows == d.size());
  CHECK(row5 == "5," + std::to_string(d.oracle_class(5)) + "," + std::to_string(d.episode_id(5)));
  std::remove(path.c_str());
}
