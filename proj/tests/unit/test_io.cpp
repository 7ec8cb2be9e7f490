#include <gtest/gtest.h>

#include "helpers.hpp"

namespace pdcl {
namespace {

namespace fs = std::filesystem;

TEST(Container, RoundTripsMetadataAndBothDtypes) {
  io::Container c;
  c.meta = {{"kind", "test"}, {"n", 3}};
  Tensor<float> f({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor<double> d({1, 2}, {0.1, -2.5});
  c.put("f", f);
  c.put("d", d);
  c.put("empty", Tensor<float>({0, 4}));
  auto back = io::Container::deserialize(c.serialize(), "mem");
  EXPECT_EQ(back.meta, c.meta);
  EXPECT_EQ(back.get<float>("f"), f);
  EXPECT_EQ(back.get<double>("d"), d);
  EXPECT_EQ(back.get<double>("f")[5], 6.0);
  EXPECT_EQ(back.get<float>("empty").shape(), (Shape{0, 4}));
  EXPECT_THROW(back.get<float>("nope"), LookupError);
  EXPECT_EQ(c.serialize(), back.serialize());
}

TEST(Container, EveryTruncationIsRejected) {
  io::Container c;
  c.put("a", Tensor<float>({3}, {1, 2, 3}));
  auto bytes = c.serialize();
  for (std::size_t n = 0; n < bytes.size(); ++n) {
    std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + long(n));
    EXPECT_THROW(io::Container::deserialize(cut, "mem"), IoError) << n;
  }
}

TEST(Container, NetworkParametersRoundTrip) {
  auto net = build_classifier<float>("res-mini", 10);
  Rng rng(3);
  net.init(rng);
  io::Container c;
  io::put_parameters(c, "net", net);
  auto other = build_classifier<float>("res-mini", 10);
  io::get_parameters(c, "net", other);
  EXPECT_EQ(other.weights_hash(), net.weights_hash());
  auto wrong = build_classifier<float>("vgg-mini", 10);
  EXPECT_THROW(io::get_parameters(c, "net", wrong), Error);
}

TEST(ImageIo, PpmRoundTripIsExact) {
  auto dir = fs::temp_directory_path() / "pdcl_io";
  fs::create_directories(dir);
  io::Rgb8Image img{5, 3, {}};
  for (std::size_t i = 0; i < 45; ++i) img.pixels.push_back(std::uint8_t(i * 5));
  io::write_ppm(dir / "a.ppm", img);
  auto back = io::read_ppm(dir / "a.ppm");
  EXPECT_EQ(back.width, 5u);
  EXPECT_EQ(back.height, 3u);
  EXPECT_EQ(back.pixels, img.pixels);
  EXPECT_THROW(io::read_ppm(dir / "absent.ppm"), IoError);
}

TEST(ImageIo, TensorRgbConversionRoundsToNearestLevel) {
  Rng rng(4);
  auto t = test::random_tensor({1, 3, 4, 4}, rng, 0, 1);
  auto img = io::to_rgb8(t, 0);
  Tensor<double> back({1, 3, 4, 4});
  io::from_rgb8(img, back, 0);
  EXPECT_LE(max_abs_diff(back, t), 0.5 / 255.0 + 1e-12);
}

TEST(ImageIo, JpegQuality100IsNearLossless) {
  auto imgs = test::toy_images(1, 32);
  Tensor<float> x(imgs.images.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] = float(imgs.images[i]);
  auto q100 = io::jpeg_roundtrip(x, 100);
  auto q10 = io::jpeg_roundtrip(x, 10);
  EXPECT_EQ(q100.shape(), x.shape());
  EXPECT_LT(max_abs_diff(q100, x), 8.0f / 255.0f);
  EXPECT_GT(max_abs_diff(q10, x), max_abs_diff(q100, x));
  EXPECT_THROW(io::decode_jpeg(std::vector<std::uint8_t>{1, 2, 3}), IoError);
}

}  // namespace
}  // namespace pdcl
