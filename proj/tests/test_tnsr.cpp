#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "mf2vqa/random.hpp"
#include "mf2vqa/tnsr.hpp"

using namespace mf2;

TEST(Tnsr, LayoutIsLittleEndianWithHeader) {
  std::ostringstream out(std::ios::binary);
  const float v[2] = {1.0f, -2.0f};
  tnsr::write<float>(out, {1, 2}, v);
  const auto s = out.str();
  ASSERT_EQ(s.size(), 4u + 1 + 1 + 2 * 4 + 2 * 4);
  EXPECT_EQ(s.substr(0, 4), "TNSR");
  EXPECT_EQ(s[4], 0);
  EXPECT_EQ(s[5], 2);
  EXPECT_EQ(static_cast<unsigned char>(s[6]), 1u);
  EXPECT_EQ(static_cast<unsigned char>(s[10]), 2u);
  float back;
  std::memcpy(&back, s.data() + 18, 4);
  EXPECT_EQ(back, -2.0f);
}

TEST(Tnsr, RoundtripIsBitExact) {
  Rng rng(3);
  std::vector<double> d(24);
  for (auto& x : d) x = rng.normal();
  Tensor<double> t({2, 3, 4}, d);
  const auto path = (std::filesystem::temp_directory_path() / "mf2_tnsr_rt.tnsr").string();
  tnsr::save(path, t);
  auto back = tnsr::load<double>(path);
  EXPECT_EQ(back.shape(), t.shape());
  EXPECT_EQ(back.vec(), t.vec());
  Tensor<float> f({5}, {0.1f, 1e-30f, -3.5f, 7.0f, 1e30f});
  tnsr::save(path, f);
  EXPECT_EQ(tnsr::load<float>(path).vec(), f.vec());
}

TEST(Tnsr, MalformedInputsReportOffsets) {
  auto parse = [](const std::string& bytes) {
    std::istringstream in(bytes, std::ios::binary);
    tnsr::Reader r(in);
    return r.read_block();
  };
  try {
    parse("TNSX");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  EXPECT_THROW(parse(std::string("TNSR\x07\x01", 6)), FormatError);
  try {
    parse(std::string("TNSR\x00\x01\x02\x00\x00\x00\x00\x00", 12));  // payload missing
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 12u);  // end of the available bytes
  }
  EXPECT_THROW(parse(std::string("TNSR\x00\x01\x00\x00\x00\x00", 10)), FormatError);  // zero dim
}
