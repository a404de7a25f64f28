#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "ctfuse/io.hpp"
#include "ctfuse/rng.hpp"

using namespace ctfuse;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() / ("ctfuse_io_test_" + std::to_string(::getpid()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

DenseTensor random_tensor(const std::vector<Index>& dims, Rng& rng) {
  DenseTensor t(dims);
  for (Index i = 0; i < t.size(); ++i) t.values()[i] = rng.normal();
  return t;
}

}  // namespace

TEST_CASE("binary tensor roundtrip is bit-exact") {
  TempDir dir;
  Rng rng(1);
  for (const auto& dims : std::vector<std::vector<Index>>{{5}, {3, 4}, {2, 3, 4}, {2, 2, 2, 3}}) {
    const DenseTensor t = random_tensor(dims, rng);
    const std::string f = dir.file("t.bin");
    write_tensor(f, t);
    const DenseTensor back = read_tensor(f);
    REQUIRE(back.order() == t.order());
    REQUIRE(back.values() == t.values());
  }
}

TEST_CASE("text tensor roundtrip is bit-exact at precision 17") {
  TempDir dir;
  Rng rng(2);
  const DenseTensor t = random_tensor({3, 5, 2}, rng);
  const std::string f = dir.file("t.txt");
  write_tensor_text(f, t);
  const DenseTensor back = read_tensor_text(f);
  REQUIRE(back.values() == t.values());
}

TEST_CASE("matrix wrappers roundtrip") {
  TempDir dir;
  Rng rng(3);
  Matrix m(4, 6);
  for (Index j = 0; j < 6; ++j) {
    for (Index i = 0; i < 4; ++i) m(i, j) = rng.normal();
  }
  const std::string f = dir.file("m.bin");
  write_matrix(f, m);
  const Matrix back = read_matrix(f);
  REQUIRE(back.rows() == 4);
  REQUIRE(back.cols() == 6);
  REQUIRE((back - m).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("read_tensor: missing file throws io_error") {
  REQUIRE_THROWS_AS(read_tensor("/nonexistent/path/tensor.bin"), io_error);
}

TEST_CASE("read_tensor: bad magic throws io_error") {
  TempDir dir;
  const std::string f = dir.file("bad.bin");
  std::ofstream(f, std::ios::binary) << "NOPE!junkjunkjunk";
  REQUIRE_THROWS_AS(read_tensor(f), io_error);
}

TEST_CASE("read_tensor: truncated payload throws io_error") {
  TempDir dir;
  Rng rng(4);
  const DenseTensor t = random_tensor({4, 4}, rng);
  const std::string f = dir.file("trunc.bin");
  write_tensor(f, t);
  std::filesystem::resize_file(f, std::filesystem::file_size(f) - 8);
  REQUIRE_THROWS_AS(read_tensor(f), io_error);
}

TEST_CASE("read_tensor: zero dimension in header throws io_error") {
  TempDir dir;
  const std::string f = dir.file("zdim.bin");
  std::ofstream out(f, std::ios::binary);
  out.write("TNSR1", 5);
  const std::uint32_t order = 2, d0 = 0, d1 = 3;
  out.write(reinterpret_cast<const char*>(&order), 4);
  out.write(reinterpret_cast<const char*>(&d0), 4);
  out.write(reinterpret_cast<const char*>(&d1), 4);
  out.close();
  REQUIRE_THROWS_AS(read_tensor(f), io_error);
}

TEST_CASE("read_tensor_text: malformed value throws io_error") {
  TempDir dir;
  const std::string f = dir.file("bad.txt");
  std::ofstream(f) << "2 2\n1.0 2.0 three 4.0\n";
  REQUIRE_THROWS_AS(read_tensor_text(f), io_error);
}
