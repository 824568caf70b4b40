#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "bsr/binary_io.hpp"
#include "bsr/errors.hpp"
#include "bsr/gradcore/ops.hpp"
#include "bsr/segnet/checkpoint.hpp"
#include "bsr/segnet/model.hpp"
#include "oracles.hpp"

using bsr::Tensor;
namespace segnet = bsr::segnet;

namespace {

segnet::ArchSpec two_head_arch() {
  segnet::ArchSpec a;
  a.scs_classes = 9;
  return a;
}

Tensor test_image(std::uint64_t seed, std::size_t h = 32, std::size_t w = 32) {
  std::mt19937_64 rng(seed);
  return oracle::random_tensor({1, h, w}, rng, 0.0, 1.0);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("bsr_segnet_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

}  // namespace

TEST(Init, DeterministicZeroBiasesAndSharedNames) {
  const auto a = segnet::init_params(two_head_arch(), 7);
  const auto b = segnet::init_params(two_head_arch(), 7);
  const auto pa = a.parameters(), pb = b.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i]->value, pb[i]->value) << pa[i]->name;
    if (pa[i]->value.rank() == 1) {
      EXPECT_EQ(pa[i]->value, Tensor(pa[i]->value.shape())) << pa[i]->name;
    }
  }
  // Dropping the subclass decoder leaves every other weight untouched.
  segnet::ArchSpec single = two_head_arch();
  single.scs_classes = 0;
  const auto s = segnet::init_params(single, 7);
  for (const auto* p : s.parameters()) {
    bool found = false;
    for (const auto* q : pa) {
      if (q->name == p->name) {
        EXPECT_EQ(q->value, p->value) << p->name;
        found = true;
      }
    }
    EXPECT_TRUE(found) << p->name;
  }
}

TEST(Init, HeVarianceForThreeByThreeBySixteenKernel) {
  // enc0.b.w is 16 x 16 x 3 x 3, fan_in = 144; pool five seeds for >= 1e4 draws.
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto p = segnet::init_params(segnet::ArchSpec{}, seed);
    for (const auto* g : p.parameters()) {
      if (g->name != "enc0.b.w") continue;
      for (double v : g->value.storage()) {
        sum += v;
        sq += v * v;
        ++n;
      }
    }
  }
  ASSERT_GE(n, 10000u);
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  EXPECT_NEAR(var / (2.0 / 144.0), 1.0, 0.2);
}

TEST(Arch, ValidatesInvariants) {
  segnet::ArchSpec a;
  a.mos_classes = 5;
  a.scs_classes = 3;
  EXPECT_THROW(a.validate(), bsr::ShapeError);
  a.scs_classes = 0;
  a.levels = 1;
  EXPECT_THROW(a.validate(), bsr::ShapeError);
}

TEST(Forward, ShapesNormalizationAndDeterminism) {
  const auto p = segnet::init_params(two_head_arch(), 1);
  const Tensor img = test_image(2);
  const auto m1 = segnet::forward(p, img, segnet::Heads::both);
  const auto m2 = segnet::forward(p, img, segnet::Heads::both);
  EXPECT_EQ(m1.mos.shape(), (bsr::Shape{5, 32, 32}));
  EXPECT_EQ(m1.scs.shape(), (bsr::Shape{9, 32, 32}));
  EXPECT_EQ(m1.mos, m2.mos);
  EXPECT_EQ(m1.scs, m2.scs);
  for (const Tensor* t : {&m1.mos, &m1.scs}) {
    const std::size_t c = t->dim(0), hw = 32 * 32;
    for (std::size_t px = 0; px < hw; ++px) {
      double s = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) s += (*t)[ch * hw + px];
      ASSERT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Forward, ZeroSigmaEqualsNoPerturbation) {
  const auto p = segnet::init_params(two_head_arch(), 1);
  const Tensor img = test_image(3);
  segnet::Perturbation none{0.0, 0.2, 99};
  EXPECT_EQ(segnet::forward(p, img, segnet::Heads::both).mos, segnet::forward(p, img, segnet::Heads::both, &none).mos);
}

TEST(Forward, SharedEncoderMatchesSeparatePasses) {
  const auto p = segnet::init_params(two_head_arch(), 4);
  const Tensor img = test_image(5);
  const auto both = segnet::forward(p, img, segnet::Heads::both);
  EXPECT_EQ(both.mos, segnet::forward(p, img, segnet::Heads::mos).mos);
  EXPECT_EQ(both.scs, segnet::forward(p, img, segnet::Heads::scs).scs);
}

TEST(Forward, RejectsBadInputs) {
  const auto p = segnet::init_params(segnet::ArchSpec{}, 1);
  EXPECT_THROW(segnet::forward(p, Tensor({1, 30, 32}), segnet::Heads::mos), bsr::ShapeError);
  EXPECT_THROW(segnet::forward(p, Tensor({2, 32, 32}), segnet::Heads::mos), bsr::ShapeError);
  EXPECT_THROW(segnet::forward(p, Tensor({1, 32, 32}), segnet::Heads::scs), bsr::ShapeError);
}

TEST(Perturbation, NoiseIsClippedAndSeeded) {
  const Tensor zero({1, 64, 64});
  segnet::Perturbation e{0.5, 0.2, 3};
  const Tensor a = e.apply(zero);
  for (double v : a.storage()) {
    EXPECT_GE(v, -0.2);
    EXPECT_LE(v, 0.2);
  }
  EXPECT_EQ(a, e.apply(zero));
  segnet::Perturbation other{0.5, 0.2, 4};
  EXPECT_NE(a, other.apply(zero));
}

TEST(Perturbation, OutputsConvergeAsSigmaShrinks) {
  const auto p = segnet::init_params(two_head_arch(), 8);
  const Tensor img = test_image(9);
  const auto clean = segnet::forward(p, img, segnet::Heads::both);
  double prev = INFINITY;
  for (double sigma : {0.1, 0.01, 0.001}) {
    segnet::Perturbation e{sigma, 10 * sigma, 17};
    const auto noisy = segnet::forward(p, img, segnet::Heads::both, &e);
    const double d = std::max(max_abs_diff(clean.mos, noisy.mos), max_abs_diff(clean.scs, noisy.scs));
    EXPECT_LT(d, prev) << "sigma " << sigma;
    prev = d;
  }
}

TEST(Features, ShapeDeterminismAndRelationToOutput) {
  const auto p = segnet::init_params(segnet::ArchSpec{}, 2);
  const Tensor img = test_image(6);
  const Tensor f = segnet::extract_features(p, img);
  EXPECT_EQ(f.shape(), (bsr::Shape{32 * 32, 16}));
  EXPECT_EQ(f, segnet::extract_features(p, img));

  // Applying the output 1x1 conv and softmax to the features reproduces the MoS map.
  Tensor chw({16, 32, 32});
  for (std::size_t px = 0; px < 1024; ++px) {
    for (std::size_t c = 0; c < 16; ++c) chw[c * 1024 + px] = f[px * 16 + c];
  }
  const Tensor probs = bsr::ops::softmax_c(
      bsr::ops::conv2d(chw, p.decoder_mos.out.weight.value, p.decoder_mos.out.bias.value));
  EXPECT_LT(max_abs_diff(probs, segnet::forward(p, img, segnet::Heads::mos).mos), 1e-12);
}

TEST(Ema, Examples) {
  segnet::ArchSpec a;
  auto student = segnet::init_params(a, 1);
  auto teacher = segnet::make_teacher(student, 0.99);
  // theta' == theta is a fixed point.
  segnet::ema_update(teacher, student);
  for (std::size_t i = 0; i < student.parameters().size(); ++i) {
    EXPECT_EQ(teacher.params.parameters()[i]->value, student.parameters()[i]->value);
  }
  for (auto* p : teacher.params.parameters()) p->value.fill(0.0);
  for (auto* p : student.parameters()) p->value.fill(1.0);
  segnet::ema_update(teacher, student);
  for (const auto* p : teacher.params.parameters()) {
    for (double v : p->value.storage()) EXPECT_NEAR(v, 0.01, 1e-15);
  }
  teacher.decay = 1.0;
  segnet::ema_update(teacher, student);
  for (const auto* p : teacher.params.parameters()) {
    for (double v : p->value.storage()) EXPECT_NEAR(v, 0.01, 1e-15);
  }
}

TEST(Ema, RejectsShapeMismatch) {
  auto teacher = segnet::make_teacher(segnet::init_params(two_head_arch(), 1), 0.99);
  EXPECT_THROW(segnet::ema_update(teacher, segnet::init_params(segnet::ArchSpec{}, 1)), bsr::ShapeError);
  segnet::ArchSpec wider = two_head_arch();
  wider.scs_classes = 11;
  EXPECT_THROW(segnet::ema_update(teacher, segnet::init_params(wider, 1)), bsr::ShapeError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto dir = temp_dir("rt");
  const auto p = segnet::init_params(two_head_arch(), 3);
  segnet::NamedTensors t;
  segnet::append_params(t, "student", p);
  segnet::append_params(t, "teacher", p);
  segnet::save_tensors(dir / "c.bsrn", t);
  const auto back = segnet::load_tensors(dir / "c.bsrn");
  ASSERT_EQ(back.size(), t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    EXPECT_EQ(back[i].first, t[i].first);
    EXPECT_EQ(back[i].second, t[i].second);
  }
  auto q = segnet::init_params(two_head_arch(), 99);
  segnet::assign_params(back, "teacher", q);
  const Tensor img = test_image(1);
  EXPECT_EQ(segnet::forward(p, img, segnet::Heads::both).scs, segnet::forward(q, img, segnet::Heads::both).scs);
  EXPECT_TRUE(segnet::has_prefix(back, "student"));
  EXPECT_FALSE(segnet::has_prefix(back, "backbone"));
}

TEST(Checkpoint, CorruptionGivesNamedErrors) {
  const auto dir = temp_dir("bad");
  segnet::NamedTensors t;
  segnet::append_params(t, "student", segnet::init_params(segnet::ArchSpec{}, 3));
  const auto good = dir / "good.bsrn";
  segnet::save_tensors(good, t);
  const auto bytes = bsr::binio::read_file(good);

  auto expect_named_error = [&](const std::vector<char>& content, const std::string& what) {
    const auto f = dir / (what + ".bsrn");
    bsr::binio::write_file_atomic(f, content);
    try {
      segnet::load_tensors(f);
      ADD_FAILURE() << what << ": no error";
    } catch (const bsr::IoError& e) {
      EXPECT_EQ(e.file(), f.string()) << what;
      EXPECT_NE(std::string(e.what()).find(f.string()), std::string::npos) << what;
    }
  };
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  expect_named_error(bad_magic, "magic");
  auto future = bytes;
  future[4] = 9;
  expect_named_error(future, "version");
  expect_named_error(std::vector<char>(bytes.begin(), bytes.begin() + bytes.size() / 2), "truncated");
  expect_named_error(std::vector<char>(bytes.begin(), bytes.begin() + 2), "tiny");
  auto huge_dim = bytes;
  // First tensor: magic(4) version(4) namelen(4) name rank(4) then dims.
  const std::size_t name_len = static_cast<unsigned char>(bytes[8]);
  const std::size_t dim_off = 12 + name_len + 4;
  for (std::size_t i = 0; i < 8; ++i) huge_dim[dim_off + i] = static_cast<char>(0x7f);
  expect_named_error(huge_dim, "hugedim");
  EXPECT_THROW(segnet::load_tensors(dir / "missing.bsrn"), bsr::IoError);

  auto q = segnet::init_params(two_head_arch(), 1);
  EXPECT_THROW(segnet::assign_params(t, "student", q), bsr::IoError);  // no scs weights stored
}
