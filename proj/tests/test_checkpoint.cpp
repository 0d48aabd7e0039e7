#include <catch2/catch_amalgamated.hpp>

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "imbseg/checkpoint.hpp"

using namespace imbseg;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("imbseg_ckpt_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::string file(const char* name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("checkpoint round-trips config and parameters", "[checkpoint]") {
  TempDir tmp;
  NetConfig cfg;
  cfg.base_channels = 4;
  cfg.levels = 2;
  cfg.leaky_slope = 0.05;
  ModelParams p = init_params(cfg, 99);
  // Float32 storage: round the reference through float before comparing.
  std::vector<double> expected(p.values.size());
  for (std::size_t i = 0; i < p.values.size(); ++i) expected[i] = static_cast<double>(static_cast<float>(p.values[i]));

  const std::string path = tmp.file("model.ckpt");
  save_checkpoint(path, cfg, p);
  const auto [cfg2, p2] = load_checkpoint(path);
  CHECK(cfg2.base_channels == 4);
  CHECK(cfg2.levels == 2);
  CHECK(cfg2.leaky_slope == 0.05);
  CHECK(cfg2.max_channels == cfg.max_channels);
  CHECK(p2.values == expected);
  CHECK(p2.shapes.size() == p.shapes.size());
}

TEST_CASE("checkpoint begins with the format magic", "[checkpoint]") {
  TempDir tmp;
  NetConfig cfg;
  cfg.base_channels = 2;
  const std::string path = tmp.file("magic.ckpt");
  save_checkpoint(path, cfg, init_params(cfg, 1));
  std::ifstream f(path, std::ios::binary);
  char head[8];
  f.read(head, 8);
  CHECK(std::string(head, 8) == "IMBSEG01");
}

TEST_CASE("checkpoint write is byte-deterministic", "[checkpoint]") {
  TempDir tmp;
  NetConfig cfg;
  cfg.base_channels = 2;
  const ModelParams p = init_params(cfg, 7);
  save_checkpoint(tmp.file("a.ckpt"), cfg, p);
  save_checkpoint(tmp.file("b.ckpt"), cfg, p);
  std::ifstream fa(tmp.file("a.ckpt"), std::ios::binary);
  std::ifstream fb(tmp.file("b.ckpt"), std::ios::binary);
  const std::string a((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  const std::string b((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  CHECK(a == b);
  CHECK(!a.empty());
}

TEST_CASE("missing checkpoint raises missing_artifact", "[checkpoint]") {
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/dir/model.ckpt"), missing_artifact);
}

TEST_CASE("corrupt checkpoints raise io_error", "[checkpoint]") {
  TempDir tmp;
  NetConfig cfg;
  cfg.base_channels = 2;
  const ModelParams p = init_params(cfg, 3);

  SECTION("bad magic") {
    const std::string path = tmp.file("bad_magic.ckpt");
    save_checkpoint(path, cfg, p);
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("NOTMAGIC", 8);
    f.close();
    CHECK_THROWS_AS(load_checkpoint(path), io_error);
  }

  SECTION("truncated parameter block") {
    const std::string path = tmp.file("short.ckpt");
    save_checkpoint(path, cfg, p);
    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 17);
    CHECK_THROWS_AS(load_checkpoint(path), io_error);
  }

  SECTION("trailing garbage") {
    const std::string path = tmp.file("long.ckpt");
    save_checkpoint(path, cfg, p);
    std::ofstream f(path, std::ios::app | std::ios::binary);
    f.write("x", 1);
    f.close();
    CHECK_THROWS_AS(load_checkpoint(path), io_error);
  }

  SECTION("config JSON garbage") {
    const std::string path = tmp.file("json.ckpt");
    save_checkpoint(path, cfg, p);
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(12);  // first byte of the JSON payload
    f.write("~", 1);
    f.close();
    CHECK_THROWS_AS(load_checkpoint(path), io_error);
  }
}

TEST_CASE("checkpoint rejects params inconsistent with the config", "[checkpoint]") {
  TempDir tmp;
  NetConfig cfg;
  cfg.base_channels = 2;
  ModelParams p = init_params(cfg, 3);
  p.values.pop_back();
  CHECK_THROWS_AS(save_checkpoint(tmp.file("bad.ckpt"), cfg, p), config_error);
}
