#include <gtest/gtest.h>

#include <map>

#include "test_util.hpp"

namespace {

using namespace skelnet;

std::vector<Label> labels_of(std::initializer_list<int> v) {
  std::vector<Label> out;
  for (int x : v) out.push_back(label_from_int(x));
  return out;
}

TEST(Confusion, HandExamples) {
  const auto y = labels_of({1, 1, 0});
  EXPECT_EQ(eval::confusion(y, y), (eval::ConfusionMatrix{2, 1, 0, 0}));
  const auto flipped = labels_of({0, 0, 1});
  const auto cm = eval::confusion(flipped, y);
  EXPECT_EQ(cm.tp, 0u);
  EXPECT_EQ(cm.tn, 0u);
  EXPECT_EQ(cm.fp, 1u);
  EXPECT_EQ(cm.fn, 2u);
  EXPECT_THROW(eval::confusion(labels_of({1}), y), DataError);
}

TEST(Metrics, HandExamples) {
  const auto perfect = eval::metrics({5, 5, 0, 0});
  for (double v : perfect.values()) EXPECT_EQ(v, 1.0);
  EXPECT_TRUE(perfect.undefined.empty());

  const auto degenerate = eval::metrics({3, 0, 0, 1});
  EXPECT_EQ(degenerate.sensitivity, 0.75);
  EXPECT_EQ(degenerate.specificity, 0.0);
  EXPECT_EQ(degenerate.undefined, std::vector<std::string>{"specificity"});

  const auto m = eval::metrics({8, 8, 2, 2});
  EXPECT_DOUBLE_EQ(m.precision, 0.8);
  EXPECT_DOUBLE_EQ(m.recall, 0.8);
  EXPECT_DOUBLE_EQ(m.f1, 0.8);
  EXPECT_THROW(eval::metrics({}), DataError);
}

TEST(Metrics, MatchBruteForceOnRandomVectors) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng() % 60;
    std::bernoulli_distribution coin(std::uniform_real_distribution<double>(0.05, 0.95)(rng));
    std::vector<Label> pred(n), truth(n);
    for (std::size_t i = 0; i < n; ++i) {
      pred[i] = coin(rng) ? Label::Dystonia : Label::Chorea;
      truth[i] = coin(rng) ? Label::Dystonia : Label::Chorea;
    }
    // Tally with a map keyed on (prediction, truth) rather than the library's branches.
    std::map<std::pair<int, int>, std::size_t> tally;
    for (std::size_t i = 0; i < n; ++i) ++tally[{to_int(pred[i]), to_int(truth[i])}];
    const double tp = tally[{1, 1}], tn = tally[{0, 0}], fp = tally[{1, 0}], fn = tally[{0, 1}];
    const auto cm = eval::confusion(pred, truth);
    ASSERT_EQ(cm.tp, (tally[{1, 1}]));
    ASSERT_EQ(cm.tn, (tally[{0, 0}]));
    ASSERT_EQ(cm.fp, (tally[{1, 0}]));
    ASSERT_EQ(cm.fn, (tally[{0, 1}]));
    const auto m = eval::metrics(cm);
    EXPECT_EQ(m.accuracy, (tp + tn) / n);
    EXPECT_EQ(m.sensitivity, tp + fn > 0 ? tp / (tp + fn) : 0.0);
    EXPECT_EQ(m.specificity, tn + fp > 0 ? tn / (tn + fp) : 0.0);
    EXPECT_EQ(m.precision, tp + fp > 0 ? tp / (tp + fp) : 0.0);
    EXPECT_EQ(m.recall, m.sensitivity);
    const double f1 = m.precision + m.recall > 0 ? 2 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
    EXPECT_EQ(m.f1, f1);
    if (tp + fn > 0 && tn + fp > 0) {
      const double prevalence = (tp + fn) / n;
      EXPECT_NEAR(m.accuracy, prevalence * m.sensitivity + (1 - prevalence) * m.specificity, 1e-12);
    }
  }
}

TEST(Percentile, LinearInterpolation) {
  EXPECT_EQ(eval::percentile({3, 1, 2}, 50), 2.0);
  EXPECT_DOUBLE_EQ(eval::percentile({0, 10}, 25), 2.5);
  EXPECT_EQ(eval::percentile({4}, 97.5), 4.0);
  EXPECT_THROW(eval::percentile({}, 50), NumericError);
}

// Exact percentile-bootstrap endpoints: enumerate every resample, then read
// the quantiles off the weighted distribution of resample means.
std::pair<double, double> enumerated_ci(const std::vector<double>& v) {
  const std::size_t n = v.size();
  std::map<double, double> mass;
  std::size_t total = 1;
  for (std::size_t i = 0; i < n; ++i) total *= n;
  for (std::size_t code = 0; code < total; ++code) {
    double s = 0;
    for (std::size_t i = 0, c = code; i < n; ++i, c /= n) s += v[c % n];
    mass[s / n] += 1.0 / total;
  }
  auto quantile = [&](double q) {
    double cum = 0;
    for (auto [x, w] : mass)
      if ((cum += w) >= q) return x;
    return mass.rbegin()->first;
  };
  return {quantile(0.025), quantile(0.975)};
}

TEST(Bootstrap, MatchesEnumerationOracle) {
  for (const std::vector<double>& v : {std::vector<double>{0.8, 0.9}, std::vector<double>{0.6, 0.7, 0.95},
                                       std::vector<double>{0.5, 0.8, 0.85, 0.9}}) {
    const auto ci = eval::bootstrap_ci(v, 100000, 17);
    const auto [lo, hi] = enumerated_ci(v);
    EXPECT_NEAR(ci.low, lo, 0.01);
    EXPECT_NEAR(ci.high, hi, 0.01);
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
    EXPECT_LE(ci.low, mean);
    EXPECT_GE(ci.high, mean);
  }
}

TEST(Bootstrap, ConstantInputAndDeterminism) {
  const std::vector<double> flat(5, 0.7);
  const auto ci = eval::bootstrap_ci(flat, 500, 1);
  EXPECT_DOUBLE_EQ(ci.low, 0.7);
  EXPECT_DOUBLE_EQ(ci.high, 0.7);
  const std::vector<double> v{0.8, 0.85, 0.9, 0.82, 0.88};
  const auto a = eval::bootstrap_ci(v, 1000, 9), b = eval::bootstrap_ci(v, 1000, 9);
  EXPECT_EQ(a.low, b.low);
  EXPECT_EQ(a.high, b.high);
  EXPECT_THROW(eval::bootstrap_ci(std::vector<double>{1.0}, 10, 1), NumericError);
}

// Composite Simpson integration of the Student t density from 0 to |t|.
double t_two_sided_p_by_quadrature(double t, double df) {
  const double c = std::exp(std::lgamma((df + 1) / 2) - std::lgamma(df / 2)) / std::sqrt(df * M_PI);
  auto f = [&](double x) { return c * std::pow(1 + x * x / df, -(df + 1) / 2); };
  const int n = 200000;
  const double a = std::abs(t), h = a / n;
  double s = f(0) + f(a);
  for (int i = 1; i < n; ++i) s += f(i * h) * (i % 2 ? 4 : 2);
  return 2 * (0.5 - s * h / 3);
}

TEST(TTest, MatchesQuadratureOracle) {
  const std::vector<double> v{0.8, 0.85, 0.9, 0.82, 0.88};
  const auto r = eval::t_test_vs_chance(v, 0.5);
  EXPECT_EQ(r.df, 4u);
  double mean = 0, ss = 0;
  for (double x : v) mean += x / 5;
  for (double x : v) ss += (x - mean) * (x - mean);
  EXPECT_NEAR(r.t, (mean - 0.5) / std::sqrt(ss / 4 / 5), 1e-12);
  EXPECT_NEAR(r.p_value, t_two_sided_p_by_quadrature(r.t, 4), 1e-6);

  const std::vector<double> near{0.45, 0.52, 0.61, 0.48, 0.55};
  const auto q = eval::t_test_vs_chance(near, 0.5);
  EXPECT_NEAR(q.p_value, t_two_sided_p_by_quadrature(q.t, 4), 1e-6);
  for (double t : {-3.0, -0.4, 0.0, 1.2, 8.0})
    for (double df : {1.0, 4.0, 30.0})
      EXPECT_NEAR(2 * (1 - eval::student_t_cdf(std::abs(t), df)), t_two_sided_p_by_quadrature(t, df), 1e-6);
}

TEST(TTest, SymmetricAndDegenerateCases) {
  const auto sym = eval::t_test_vs_chance(std::vector<double>{0.4, 0.6, 0.45, 0.55}, 0.5);
  EXPECT_NEAR(sym.t, 0.0, 1e-12);
  EXPECT_NEAR(sym.p_value, 1.0, 1e-12);
  const auto flat = eval::t_test_vs_chance(std::vector<double>(5, 0.9), 0.5);
  EXPECT_TRUE(flat.degenerate);
  EXPECT_EQ(flat.p_value, 0.0);
  const auto chance = eval::t_test_vs_chance(std::vector<double>(5, 0.5), 0.5);
  EXPECT_TRUE(chance.degenerate);
  EXPECT_EQ(chance.p_value, 1.0);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 1);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> v(2 + rng() % 6);
    for (auto& x : v) x = u(rng);
    const double p = eval::t_test_vs_chance(v).p_value;
    EXPECT_GE(p, 0.0);
    EXPECT_LE(p, 1.0);
  }
}

SkeletonClip tagged(Label l, const std::string& video) {
  SkeletonClip c;
  c.matrix = Tensor(Shape{kClipRows, 4});
  c.label = l;
  c.source.video_id = video;
  return c;
}

TEST(StratifiedKFold, PartitionAndBalance) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t k = 2 + rng() % 5;
    const std::size_t n0 = k + rng() % 40, n1 = k + rng() % 40;
    std::vector<SkeletonClip> clips;
    for (std::size_t i = 0; i < n0; ++i) clips.push_back(tagged(Label::Chorea, "c" + std::to_string(i)));
    for (std::size_t i = 0; i < n1; ++i) clips.push_back(tagged(Label::Dystonia, "d" + std::to_string(i)));
    const auto fold = eval::stratified_kfold(clips, k, trial, false);
    ASSERT_EQ(fold.size(), clips.size());
    std::vector<std::array<double, 2>> count(k);
    for (std::size_t i = 0; i < clips.size(); ++i) {
      ASSERT_LT(fold[i], k);
      count[fold[i]][to_int(clips[i].label)] += 1;
    }
    for (std::size_t f = 0; f < k; ++f) {
      EXPECT_LE(std::abs(count[f][0] - double(n0) / k), 1.0);
      EXPECT_LE(std::abs(count[f][1] - double(n1) / k), 1.0);
    }
    EXPECT_EQ(eval::stratified_kfold(clips, k, trial, false), fold);
  }
}

TEST(StratifiedKFold, GroupsStayTogetherAndSmallClassesFail) {
  std::vector<SkeletonClip> clips;
  for (int v = 0; v < 12; ++v)
    for (int w = 0; w < 2; ++w) clips.push_back(tagged(v % 2 ? Label::Dystonia : Label::Chorea, "v" + std::to_string(v)));
  const auto fold = eval::stratified_kfold(clips, 3, 1, true);
  for (std::size_t i = 0; i + 1 < clips.size(); i += 2) EXPECT_EQ(fold[i], fold[i + 1]);
  EXPECT_THROW(eval::stratified_kfold(clips, 1, 1), ConfigError);
  std::vector<SkeletonClip> few{tagged(Label::Chorea, "a"), tagged(Label::Dystonia, "b"),
                                tagged(Label::Dystonia, "c")};
  EXPECT_THROW(eval::stratified_kfold(few, 2, 1), DataError);
}

TEST(CrossValidate, ReportIsSeedDeterministic) {
  std::vector<SkeletonClip> clips;
  for (std::uint64_t s = 0; s < 4; ++s) {
    clips.push_back(skelnet::testing::synthetic_clip(synth::MotionClass::ChoreaLike, 2 * s, 8));
    clips.push_back(skelnet::testing::synthetic_clip(synth::MotionClass::DystoniaLike, 2 * s + 1, 8));
  }
  train::TrainConfig tc;
  tc.max_epochs = 2;
  tc.batch_size = 4;
  eval::CvOptions opt;
  opt.k = 2;
  opt.n_boot = 200;
  const auto a = eval::cross_validate(clips, skelnet::testing::tiny_config(), tc, opt);
  const auto b = eval::cross_validate(clips, skelnet::testing::tiny_config(), tc, opt);
  EXPECT_EQ(eval::to_json(a).dump(), eval::to_json(b).dump());
  ASSERT_EQ(a.folds.size(), 2u);
  ASSERT_EQ(a.summary.size(), 6u);
  std::size_t held = 0;
  for (const auto& f : a.folds) held += f.confusion.total();
  EXPECT_EQ(held, clips.size());
  EXPECT_NE(eval::format_table(a.summary).find("accuracy"), std::string::npos);
}

}  // namespace
