#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"

#include "detach/io.hpp"
#include "detach/params.hpp"
#include "detach/rng.hpp"

using namespace detach;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  fs::path p = fs::temp_directory_path() / "io_tests";
  fs::create_directories(p);
  return p;
}

std::string read_bytes(const fs::path& p) { return io::read_text_file(p.string()); }

void corrupt_byte(const fs::path& p, size_t offset, char value) {
  std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(std::streamoff(offset));
  f.write(&value, 1);
}

void truncate_to(const fs::path& src, const fs::path& dst, size_t n) {
  std::string bytes = read_bytes(src);
  io::write_text_file(dst.string(), bytes.substr(0, n));
}

}  // namespace

TEST_SUITE("io") {

TEST_CASE("tensor record round trip is byte identical") {
  fs::path dir = temp_dir();
  Tensor<float> t({2, 3, 4});
  Rng r(1);
  for (auto& v : t.data) v = float(r.uniform(-5.0, 5.0));
  fs::path p1 = dir / "a.dtch", p2 = dir / "b.dtch";
  io::write_tensor_record(p1.string(), t);
  Tensor<float> back = io::read_tensor_record(p1.string());
  REQUIRE(back.shape == t.shape);
  for (size_t i = 0; i < t.data.size(); ++i) CHECK(back.data[i] == t.data[i]);
  io::write_tensor_record(p2.string(), back);
  CHECK(read_bytes(p1) == read_bytes(p2));
}

TEST_CASE("tensor record rejects bad magic with offset") {
  fs::path dir = temp_dir();
  fs::path p = dir / "magic.dtch";
  io::write_tensor_record(p.string(), Tensor<float>({2, 2}, 1.0f));
  corrupt_byte(p, 0, 'X');
  try {
    io::read_tensor_record(p.string());
    FAIL("expected CorruptFileError");
  } catch (const io::CorruptFileError& e) {
    std::string msg = e.what();
    CHECK(msg.find("bad magic") != std::string::npos);
    CHECK(msg.find("offset 0") != std::string::npos);
    CHECK(msg.find(p.string()) != std::string::npos);
  }
}

TEST_CASE("tensor record reports truncation with byte offset") {
  fs::path dir = temp_dir();
  fs::path full = dir / "full.dtch", cut = dir / "cut.dtch";
  io::write_tensor_record(full.string(), Tensor<float>({2, 2}, 1.0f));
  // header is 4 magic + 4 version + 4 rank + 8 dims = 20 bytes; cut the payload
  truncate_to(full, cut, 24);
  try {
    io::read_tensor_record(cut.string());
    FAIL("expected CorruptFileError");
  } catch (const io::CorruptFileError& e) {
    std::string msg = e.what();
    CHECK(msg.find("truncated payload") != std::string::npos);
    CHECK(msg.find("offset 20") != std::string::npos);
  }
  // cut inside the header as well
  fs::path cut2 = dir / "cut2.dtch";
  truncate_to(full, cut2, 6);
  CHECK_THROWS_AS(io::read_tensor_record(cut2.string()), io::CorruptFileError);
}

TEST_CASE("tensor record rejects wrong version") {
  fs::path dir = temp_dir();
  fs::path p = dir / "ver.dtch";
  io::write_tensor_record(p.string(), Tensor<float>({1}, 2.0f));
  corrupt_byte(p, 4, 9);  // version little-endian low byte
  try {
    io::read_tensor_record(p.string());
    FAIL("expected CorruptFileError");
  } catch (const io::CorruptFileError& e) {
    CHECK(std::string(e.what()).find("unsupported version 9") != std::string::npos);
  }
}

TEST_CASE("checkpoint round trip preserves metadata, order, and bytes") {
  fs::path dir = temp_dir();
  io::Checkpoint ck;
  ck.metadata = {{"kind", "stage1"}, {"epoch", 7}};
  Tensor<float> a({3, 2});
  Rng r(2);
  for (auto& v : a.data) v = float(r.gaussian());
  ck.put("enc/w", a);
  ck.put("enc/bias", Tensor<float>({2}, 0.5f));
  ck.put("cluster/centroids", Tensor<float>({4, 2}, -1.0f));
  fs::path p1 = dir / "ck1.dtch", p2 = dir / "ck2.dtch";
  io::save_checkpoint(p1.string(), ck);
  io::Checkpoint back = io::load_checkpoint(p1.string());
  CHECK(back.metadata.at("epoch") == 7);
  REQUIRE(back.order == ck.order);
  for (auto& name : ck.order) {
    REQUIRE(back.tensors.at(name).shape == ck.tensors.at(name).shape);
    for (size_t i = 0; i < ck.tensors.at(name).data.size(); ++i)
      CHECK(back.tensors.at(name).data[i] == ck.tensors.at(name).data[i]);
  }
  io::save_checkpoint(p2.string(), back);
  CHECK(read_bytes(p1) == read_bytes(p2));
}

TEST_CASE("checkpoint put overwrites without duplicating sections") {
  io::Checkpoint ck;
  ck.put("a", Tensor<float>({1}, 1.0f));
  ck.put("a", Tensor<float>({1}, 2.0f));
  CHECK(ck.order.size() == 1);
  CHECK(ck.tensors.at("a").data[0] == 2.0f);
}

TEST_CASE("checkpoint param round trip through put_params/get_params") {
  nn::ParamSet<float> ps;
  ps.add("l1.weight", {4, 3});
  ps.add("l1.bias", {4});
  Rng r(3);
  nn::init_params(ps, r);
  io::Checkpoint ck;
  ck.put_params("sensor", ps);
  nn::ParamSet<float> back;
  back.add("l1.weight", {4, 3});
  back.add("l1.bias", {4});
  ck.get_params("sensor", back);
  CHECK(back.bit_equal(ps));
  // missing sections: collected when requested, thrown otherwise
  nn::ParamSet<float> extra;
  extra.add("l2.weight", {2, 2});
  std::vector<std::string> missing;
  ck.get_params("sensor", extra, &missing);
  REQUIRE(missing.size() == 1);
  CHECK(missing[0] == "sensor/l2.weight");
  CHECK_THROWS_AS(ck.get_params("sensor", extra), std::runtime_error);
  // shape mismatch is an error even with a missing-collector
  nn::ParamSet<float> wrong;
  wrong.add("l1.weight", {3, 4});
  CHECK_THROWS_AS(ck.get_params("sensor", wrong, &missing), std::runtime_error);
}

TEST_CASE("checkpoint version mismatch warns when a collector is given") {
  fs::path dir = temp_dir();
  fs::path p = dir / "ckver.dtch";
  io::Checkpoint ck;
  ck.metadata = {{"x", 1}};
  ck.put("t", Tensor<float>({1}, 3.0f));
  io::save_checkpoint(p.string(), ck);
  corrupt_byte(p, 4, 2);
  std::vector<std::string> warnings;
  io::Checkpoint back = io::load_checkpoint(p.string(), &warnings);
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find("version 2") != std::string::npos);
  CHECK(back.tensors.at("t").data[0] == 3.0f);
  CHECK_THROWS_AS(io::load_checkpoint(p.string()), io::CorruptFileError);
}

TEST_CASE("checkpoint structural corruption always throws") {
  fs::path dir = temp_dir();
  fs::path p = dir / "ckcut.dtch";
  io::Checkpoint ck;
  ck.put("t", Tensor<float>({2}, 1.0f));
  io::save_checkpoint(p.string(), ck);
  std::string bytes = read_bytes(p);
  fs::path cut = dir / "ckcut2.dtch";
  io::write_text_file(cut.string(), bytes.substr(0, bytes.size() - 3));
  std::vector<std::string> warnings;
  CHECK_THROWS_AS(io::load_checkpoint(cut.string(), &warnings), io::CorruptFileError);
  CHECK_THROWS_AS(io::load_checkpoint((dir / "missing.dtch").string()), std::runtime_error);
}

TEST_CASE("hex64 and config_hash are stable") {
  CHECK(io::hex64(0) == "0000000000000000");
  CHECK(io::hex64(0xdeadbeefull) == "00000000deadbeef");
  nlohmann::json j = {{"a", 1}, {"b", "x"}};
  CHECK(io::config_hash(j) == io::config_hash(j));
  CHECK(io::config_hash(j) == io::hex64(fnv1a64(j.dump())));
  nlohmann::json j2 = j;
  j2["a"] = 2;
  CHECK(io::config_hash(j) != io::config_hash(j2));
}

TEST_CASE("text file round trip") {
  fs::path dir = temp_dir();
  std::string content = "line1\nline2", round;
  content.push_back('\0');
  content += "binary\n";
  fs::path p = dir / "t.txt";
  io::write_text_file(p.string(), content);
  round = io::read_text_file(p.string());
  CHECK(round == content);
  CHECK_THROWS_AS(io::read_text_file((dir / "nope.txt").string()), std::runtime_error);
}

}  // TEST_SUITE
