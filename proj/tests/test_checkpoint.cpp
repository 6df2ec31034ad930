#include <doctest.h>

#include <filesystem>
#include <sstream>

#include "rticket/checkpoint.hpp"
#include "rticket/errors.hpp"
#include "test_support.hpp"

using namespace rticket;

namespace {

std::string serialize(const MaskedModel& m) {
  std::ostringstream out(std::ios::binary);
  write_checkpoint(m, out);
  return out.str();
}

MaskedModel deserialize(const std::string& bytes) {
  std::istringstream in(bytes, std::ios::binary);
  return read_checkpoint(in);
}

MaskedModel populated_model() {
  MaskedModel m(testing::tiny_config(2, 2), 11);
  m.snapshot_pretrained();
  for (auto& v : m.theta()) {
    v += 1e-3;
  }
  m.bind_gates(GateParams::initialized(m.maskable_count(), 5, kDefaultBeta));
  return m;
}

}  // namespace

TEST_CASE("checkpoint save-load-save is byte identical") {
  const auto m = populated_model();
  const auto first = serialize(m);
  const auto loaded = deserialize(first);
  CHECK(serialize(loaded) == first);
  CHECK(loaded.config() == m.config());
  CHECK(loaded.has_pretrained());
  REQUIRE(loaded.gates().has_value());
  CHECK(loaded.gates()->size() == m.maskable_count());
}

TEST_CASE("stored values are the float32 rounding of the originals") {
  const auto m = populated_model();
  const auto loaded = deserialize(serialize(m));
  for (std::size_t i = 0; i < m.theta().size(); ++i) {
    CHECK(loaded.theta()[i] == static_cast<double>(static_cast<float>(m.theta()[i])));
  }
  auto rounded = m;
  round_to_storage(rounded);
  CHECK(checksum(rounded.theta()) == checksum(loaded.theta()));
  CHECK(checksum(rounded.theta0()) == checksum(loaded.theta0()));
  CHECK(serialize(rounded) == serialize(m));
}

TEST_CASE("round_to_storage is idempotent") {
  auto m = populated_model();
  round_to_storage(m);
  const auto once = checksum(m.theta());
  round_to_storage(m);
  CHECK(checksum(m.theta()) == once);
}

TEST_CASE("pretrained snapshot checksum survives a file round trip") {
  auto m = populated_model();
  round_to_storage(m);
  const auto path = std::filesystem::temp_directory_path() / "rticket_ckpt_test.bin";
  save_checkpoint(m, path);
  const auto loaded = load_checkpoint(path);
  CHECK(checksum(loaded.theta0()) == checksum(m.theta0()));
  CHECK(checksum(loaded.theta()) == checksum(m.theta()));
  std::filesystem::remove(path);
}

TEST_CASE("model without snapshot or gates round trips") {
  MaskedModel m(testing::tiny_config(), 3);
  const auto loaded = deserialize(serialize(m));
  CHECK_FALSE(loaded.has_pretrained());
  CHECK_FALSE(loaded.gates().has_value());
}

TEST_CASE("corrupt checkpoints are rejected") {
  const auto bytes = serialize(populated_model());
  SUBCASE("bad magic") {
    auto b = bytes;
    b[0] = 'X';
    CHECK_THROWS_AS(deserialize(b), FormatError);
  }
  SUBCASE("bad version") {
    auto b = bytes;
    b[8] = 9;
    CHECK_THROWS_AS(deserialize(b), FormatError);
  }
  SUBCASE("truncated") {
    CHECK_THROWS_AS(deserialize(bytes.substr(0, bytes.size() / 2)), FormatError);
  }
  SUBCASE("empty") { CHECK_THROWS_AS(deserialize(""), FormatError); }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_checkpoint("/nonexistent/ckpt.bin"), FormatError); }
}
