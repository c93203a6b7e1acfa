#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "nuclearea/weights_io.hpp"

using namespace nuclearea;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "nuclearea_weights_test";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ArchitectureConfig small_config() {
  ArchitectureConfig c;
  c.patch_px = 32;
  c.narrow_width = 4;
  c.wide_width = 6;
  c.fc_width = 8;
  c.num_classes = 21;
  return c;
}

}  // namespace

TEST(WeightsIo, SaveLoadSaveIsByteIdentical) {
  const auto d = build_paper_architecture(small_config());
  const auto p = init_params<float>(d, 5);
  const auto a = temp_path("a.nnw"), b = temp_path("b.nnw");
  save_weights(p, a.string());
  const auto loaded = load_weights<float>(a.string(), d);
  EXPECT_EQ(loaded.tensors, p.tensors);
  EXPECT_EQ(loaded.names, p.names);
  save_weights(loaded, b.string());
  EXPECT_EQ(slurp(a), slurp(b));
}

TEST(WeightsIo, LayoutIsLittleEndianNnw1) {
  NetworkParams<float> p;
  p.names = {"w"};
  p.tensors = {Tensor<float>({2}, std::vector<float>{1.0f, -2.0f})};
  const auto path = temp_path("tiny.nnw");
  save_weights(p, path.string());
  const std::string expected = std::string("NNW1") + std::string("\x01\x00", 2) + "w" + std::string("\x01", 1) +
                               std::string("\x02\x00\x00\x00", 4) + std::string("\x00\x00\x80\x3f", 4) +
                               std::string("\x00\x00\x00\xc0", 4);
  EXPECT_EQ(slurp(path), expected);
}

TEST(WeightsIo, TruncatedFileReported) {
  const auto d = build_paper_architecture(small_config());
  const auto path = temp_path("trunc.nnw");
  save_weights(init_params<float>(d, 1), path.string());
  const auto bytes = slurp(path);
  std::ofstream(path, std::ios::binary | std::ios::trunc).write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 7));
  try {
    load_weights<float>(path.string(), d);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated payload"), std::string::npos) << e.what();
  }
}

TEST(WeightsIo, CorruptHeaderReported) {
  const auto path = temp_path("corrupt.nnw");
  std::ofstream(path, std::ios::binary | std::ios::trunc) << "NNX1garbage";
  try {
    read_tensor_container(path.string());
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("corrupt header"), std::string::npos) << e.what();
  }
}

TEST(WeightsIo, ShapeMismatchReported) {
  const auto path = temp_path("mismatch.nnw");
  save_weights(init_params<float>(build_paper_architecture(small_config()), 1), path.string());
  auto other = small_config();
  other.num_classes = 20;
  try {
    load_weights<float>(path.string(), build_paper_architecture(other));
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("shape mismatch"), std::string::npos) << e.what();
  }
}

TEST(WeightsIo, ArchitectureInferredFromFile) {
  const auto path = temp_path("infer.nnw");
  const auto d = build_paper_architecture(small_config());
  save_weights(init_params<float>(d, 1), path.string());
  const auto model = load_model<float>(path.string());
  EXPECT_EQ(model.description.config.num_classes, 21u);
  EXPECT_EQ(model.description.config.patch_px, 32u);
  EXPECT_EQ(model.description.config, d.config);
}

TEST(WeightsIo, DenseFormLoadsIntoPatchArchitecture) {
  const auto d = build_paper_architecture(small_config());
  const auto p = init_params<float>(d, 9);
  const auto path = temp_path("dense.nnw");
  save_dense_network(convert_to_fully_convolutional(d, p), path.string());
  EXPECT_EQ(read_tensor_container(path.string())[16].tensor.shape(), (Shape{8, 6, 2, 2}));
  EXPECT_EQ(load_model<float>(path.string()).params.tensors, p.tensors);
}
