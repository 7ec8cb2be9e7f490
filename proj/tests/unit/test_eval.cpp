#include <gtest/gtest.h>

#include "helpers.hpp"

namespace pdcl {
namespace {

struct Victim {
  nn::Network<float> net = build_classifier<float>("vgg-mini", 10);
  LabeledImages<float> val;

  Victim() {
    DatasetSpec s = DatasetSpec::toy();
    s.train_per_class = 100;
    s.val_per_class = 20;
    ClassifierTrainConfig cc;
    cc.epochs = 15;
    train_classifier(net, load_split<float>(s, Split::Train), cc);
    val = load_split<float>(s, Split::Val);
  }
};

Victim& victim() {
  static Victim v;
  return v;
}

Generator<float> random_generator() {
  Generator<float> g(GeneratorArch::desk());
  Rng rng(77);
  g.init(rng);
  return g;
}

TEST(Top1, CountsCorrectPredictions) {
  std::vector<int> pred{0, 1, 2, 3}, labels{0, 1, 2, 3}, half{0, 1, 0, 0};
  EXPECT_DOUBLE_EQ(top1_percent(pred, labels), 100.0);
  EXPECT_DOUBLE_EQ(top1_percent(half, labels), 50.0);
  EXPECT_THROW(top1_percent(std::vector<int>{}, std::vector<int>{}), DegenerateInputError);
  EXPECT_THROW(top1_percent(pred, std::vector<int>{0}), ConfigError);
  auto& v = victim();
  EXPECT_THROW(evaluate_top1(v.net, Tensor<float>({0, 3, 32, 32}), std::vector<int>{}),
               DegenerateInputError);
}

TEST(SuccessRate, NoOpFullAndUndefined) {
  std::vector<int> labels{0, 1, 2, 3}, clean{0, 1, 2, 0};
  EXPECT_DOUBLE_EQ(*success_rate(clean, clean, labels), 0.0);
  std::vector<int> wrong{1, 2, 3, 0};
  EXPECT_DOUBLE_EQ(*success_rate(clean, wrong, labels), 100.0);
  EXPECT_NEAR(*success_rate(clean, std::vector<int>{1, 1, 2, 0}, labels), 100.0 / 3.0, 1e-12);
  EXPECT_FALSE(success_rate(wrong, clean, labels).has_value());
}

TEST(Psnr, CapShiftAndScalarOracle) {
  Tensor<double> a({2, 3, 8, 8}, 0.5);
  EXPECT_DOUBLE_EQ(psnr(a, a), kPsnrCap);
  Tensor<double> b({2, 3, 8, 8}, 0.5 + 10.0 / 255.0);
  EXPECT_NEAR(psnr(a, b), 28.13, 0.005);
  EXPECT_NEAR(psnr(a, b), 20.0 * std::log10(25.5), 1e-9);
  Rng rng(41);
  auto x = test::random_tensor({3, 3, 8, 8}, rng, 0, 1), y = test::random_tensor({3, 3, 8, 8}, rng, 0, 1);
  double oracle = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    double mse = 0;
    for (std::size_t k = 0; k < 192; ++k) mse += std::pow(x[i * 192 + k] - y[i * 192 + k], 2);
    oracle += 10.0 * std::log10(1.0 / (mse / 192.0));
  }
  EXPECT_NEAR(psnr(x, y), oracle / 3.0, 1e-6);
}

TEST(Ssim, IdentityAndConstantImagesMatchClosedForm) {
  Rng rng(42);
  auto x = test::random_tensor({2, 3, 16, 16}, rng, 0, 1);
  EXPECT_NEAR(ssim(x, x), 1.0, 1e-12);
  Tensor<double> a({1, 1, 12, 12}, 0.3), b({1, 1, 12, 12}, 0.6);
  const double c1 = 0.01 * 0.01;
  EXPECT_NEAR(ssim(a, b), (2 * 0.3 * 0.6 + c1) / (0.09 + 0.36 + c1), 1e-9);
  auto y = test::random_tensor({2, 3, 16, 16}, rng, 0, 1);
  const double s = ssim(x, y);
  EXPECT_LT(s, 0.5);
  EXPECT_GT(s, -1.0);
  EXPECT_NEAR(ssim(x, y), ssim(y, x), 1e-12);
}

TEST(Spearman, RanksAndCorrelation) {
  std::vector<double> x{6, 7, 8, 9, 10}, down{90, 80, 70, 60, 50}, up{1, 2, 3, 4, 5};
  EXPECT_NEAR(spearman(x, down), -1.0, 1e-12);
  EXPECT_NEAR(spearman(x, up), 1.0, 1e-12);
  std::vector<double> ties{1, 2, 2, 3};
  EXPECT_EQ(ranks(ties), (std::vector<double>{1, 2.5, 2.5, 4}));
  // Scalar oracle: 1 - 6 sum d^2 / (n (n^2 - 1)) when there are no ties.
  std::vector<double> y{3, 1, 4, 5, 2};
  double d2 = 0;
  auto rx = ranks(x), ry = ranks(y);
  for (std::size_t i = 0; i < 5; ++i) d2 += (rx[i] - ry[i]) * (rx[i] - ry[i]);
  EXPECT_NEAR(spearman(x, y), 1.0 - 6.0 * d2 / (5.0 * 24.0), 1e-12);
  std::vector<double> flat{1, 1, 1};
  EXPECT_THROW(spearman(flat, flat), DegenerateInputError);
}

TEST(AverageColumn, MeanOfCells) {
  std::vector<double> cells{43.0, 41.0, 47.0};
  EXPECT_NEAR(average_column(cells), 43.666666666666667, 1e-12);
  EXPECT_THROW(average_column(std::vector<double>{}), DegenerateInputError);
}

TEST(BudgetSweep, ZeroBudgetRowEqualsCleanAccuracy) {
  auto& v = victim();
  auto gen = random_generator();
  std::vector<double> eps{0, 4, 10, 16};
  auto rows = budget_sweep(gen, v.net, v.val.images, v.val.labels, eps, 10.0, "toy10", "vgg-mini");
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_DOUBLE_EQ(rows[0].top1_attacked, rows[0].top1_clean);
  EXPECT_DOUBLE_EQ(rows[0].psnr_db, kPsnrCap);
  EXPECT_FALSE(rows[2].beyond_training_budget);
  EXPECT_TRUE(rows[3].beyond_training_budget);
  EXPECT_DOUBLE_EQ(rows[1].epsilon, 4.0);
  std::vector<double> unsorted{10, 6};
  EXPECT_THROW(budget_sweep(gen, v.net, v.val.images, v.val.labels, unsorted, 10.0, "t", "v"),
               ConfigError);
}

TEST(EvaluateCell, RejectsOverBudgetBatches) {
  auto& v = victim();
  auto b = PerturbationBudget::from_levels(10);
  Tensor<float> adv = v.val.images;
  adv[0] = adv[0] > 0.5f ? adv[0] - 0.2f : adv[0] + 0.2f;
  EXPECT_THROW(evaluate_cell(v.net, v.val.images, adv, v.val.labels, b, "toy10", "vgg-mini"),
               InvariantViolation);
}

TEST(JpegDefense, HighQualityAndCleanCompressionBarelyMove) {
  auto& v = victim();
  const double clean = evaluate_top1(v.net, v.val.images, v.val.labels);
  ASSERT_GE(clean, 80.0);
  auto b = PerturbationBudget::from_levels(10);
  auto adv = craft_adversarial(random_generator(), v.val.images, b);
  auto none = evaluate_cell(v.net, v.val.images, adv, v.val.labels, b, "toy10", "vgg-mini");
  auto q100 = jpeg_defense_eval(v.net, v.val.images, adv, v.val.labels, b, 100, "toy10", "vgg-mini");
  ASSERT_TRUE(q100.has_value());
  EXPECT_EQ(q100->defense, "jpeg100");
  EXPECT_LE(std::abs(q100->top1_attacked - none.top1_attacked), 2.0);
  auto q75 = jpeg_defense_eval(v.net, v.val.images, adv, v.val.labels, b, 75, "toy10", "vgg-mini");
  ASSERT_TRUE(q75.has_value());
  EXPECT_LE(std::abs(q75->top1_clean - clean), 3.0);
  EXPECT_THROW(jpeg_defense_eval(v.net, v.val.images, adv, v.val.labels, b, 0, "t", "v"), ConfigError);
  EXPECT_THROW(jpeg_defense_eval(v.net, v.val.images, adv, v.val.labels, b, 101, "t", "v"), ConfigError);
}

AttackReport sample_report() {
  AttackReport r;
  r.run_id = "evaluate-0123456789ab";
  r.config_hash = "00ff";
  r.model = {"clip-mini", 64, 0.01};
  ReportRow a;
  a.dataset = "toy10";
  a.victim = "vgg-mini";
  a.epsilon = 10;
  a.top1_clean = 99;
  a.top1_attacked = 70;
  a.asr = 29.29;
  a.psnr_db = 28.5;
  a.ssim = 0.9141;
  ReportRow b = a;
  b.dataset = "toy10-shifted";
  b.top1_attacked = 30;
  b.asr.reset();
  b.beyond_training_budget = true;
  r.rows = {a, b};
  return r;
}

TEST(Report, CsvRoundTripsAndIsDeterministic) {
  auto r = sample_report();
  EXPECT_EQ(r.to_csv(), sample_report().to_csv());
  EXPECT_EQ(r.to_markdown(), sample_report().to_markdown());
  auto rows = parse_report_csv(r.to_csv(), "mem");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].dataset, "toy10");
  EXPECT_DOUBLE_EQ(*rows[0].asr, 29.29);
  EXPECT_FALSE(rows[1].asr.has_value());
  EXPECT_TRUE(rows[1].beyond_training_budget);
  EXPECT_NE(r.to_markdown().find("n/a"), std::string::npos);
  EXPECT_THROW(parse_report_csv("a,b\n", "mem"), IoError);
  EXPECT_THROW(parse_report_csv(AttackReport::header_csv() + "\n1,2\n", "mem"), IoError);
}

TEST(Report, SummaryTableAveragesAcrossDatasets) {
  auto t = summary_table(sample_report().rows);
  EXPECT_NE(t.find("| toy10 | toy10-shifted | AVG |"), std::string::npos);
  EXPECT_NE(t.find("| vgg-mini | none | clean | 99.00 | 99.00 | 99.00 |"), std::string::npos);
  EXPECT_NE(t.find("| vgg-mini | none | 10 | 70.00 | 30.00 | 50.00 |"), std::string::npos);
}

TEST(Report, SweepSvgHasOneSeriesPerVictim) {
  auto rows = sample_report().rows;
  rows[1].dataset = "toy10";
  rows[1].epsilon = 6;
  auto svg = sweep_svg(rows, "sweep");
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("vgg-mini"), std::string::npos);
}

}  // namespace
}  // namespace pdcl
