#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "rticket/errors.hpp"
#include "rticket/ticket.hpp"
#include "test_support.hpp"

using namespace rticket;

TEST_CASE("lowest scores are pruned") {
  const std::vector<double> scores{-3.0, -1.0, 0.0, 2.0};
  CHECK(prune_lowest(scores, 0.5) == std::vector<std::uint8_t>{0, 0, 1, 1});
  CHECK(prune_lowest(scores, 0.0) == std::vector<std::uint8_t>{1, 1, 1, 1});
  CHECK(prune_lowest(std::vector<double>{1.0, 1.0, 1.0}, 0.34) == std::vector<std::uint8_t>{0, 1, 1});
  CHECK_THROWS_AS(prune_lowest(scores, 1.0), ConfigError);
  CHECK_THROWS_AS(prune_lowest(scores, -0.1), ConfigError);
}

TEST_CASE("prune_lowest agrees with a sort oracle") {
  for (std::uint64_t trial = 0; trial < 200; ++trial) {
    Rng rng(trial);
    const auto n = 1 + static_cast<std::size_t>(rng.below(300));
    std::vector<double> scores(n);
    for (auto& s : scores) {
      // Coarse values force ties.
      s = std::round(rng.normal() * 4.0) / 4.0;
    }
    const double p = rng.uniform(0.0, 0.999);
    const auto keep = prune_lowest(scores, p);
    const auto expected_zeros = static_cast<std::size_t>(std::floor(p * static_cast<double>(n)));
    CHECK(static_cast<std::size_t>(std::count(keep.begin(), keep.end(), 0)) == expected_zeros);

    std::vector<std::pair<double, std::size_t>> pairs;
    for (std::size_t i = 0; i < n; ++i) pairs.emplace_back(scores[i], i);
    std::sort(pairs.begin(), pairs.end());
    std::vector<std::uint8_t> oracle(n, 1);
    for (std::size_t k = 0; k < expected_zeros; ++k) oracle[pairs[k].second] = 0;
    CHECK(keep == oracle);

    // Strictly increasing transforms of the scores give the same ticket.
    std::vector<double> transformed(n);
    std::transform(scores.begin(), scores.end(), transformed.begin(), [](double s) { return std::exp(s) * 3.0 + 7.0; });
    CHECK(prune_lowest(transformed, p) == keep);
  }
}

TEST_CASE("ticket accounting over a model layout") {
  const auto cfg = testing::tiny_config(2, 2);
  const ParamLayout layout(cfg);
  const auto scores = testing::random_vector(layout.maskable_count(), 3, -2.0, 2.0);
  const auto t = draw_ticket(scores, layout, 0.37);
  const double n = static_cast<double>(layout.maskable_count());
  CHECK(std::abs(t.sparsity() - 0.37) <= 1.0 / n);
  CHECK(t.layer_sparsity == compute_layer_sparsity(layout, t.keep_mask));
  CHECK(t.layer_sparsity.size() == 12);

  double weighted = 0.0;
  std::size_t total = 0;
  for (const auto& ls : t.layer_sparsity) {
    weighted += ls.sparsity() * static_cast<double>(ls.total);
    total += ls.total;
  }
  CHECK(total == layout.maskable_count());
  CHECK(weighted / static_cast<double>(total) == doctest::Approx(t.sparsity()).epsilon(1e-12));

  const auto id = identity_ticket(layout);
  CHECK(id.pruned_count() == 0);
  CHECK_THROWS_AS(draw_ticket(std::vector<double>(3, 0.0), layout, 0.1), ContractViolation);
}

TEST_CASE("random tickets match the reference per matrix") {
  const auto cfg = testing::tiny_config(2, 2);
  const ParamLayout layout(cfg);
  const auto scores = testing::random_vector(layout.maskable_count(), 8, -2.0, 2.0);
  const auto ref = draw_ticket(scores, layout, 0.45);
  const auto a = random_ticket(ref, layout, 1);
  const auto b = random_ticket(ref, layout, 2);
  CHECK(a.layer_sparsity == ref.layer_sparsity);
  CHECK(b.layer_sparsity == ref.layer_sparsity);
  CHECK(a.keep_mask != b.keep_mask);
  CHECK(a.pruned_count() == ref.pruned_count());
  CHECK(random_ticket(ref, layout, 1).keep_mask == a.keep_mask);
  CHECK(a.provenance == "random");
}

TEST_CASE("ticket files round trip exactly") {
  const auto cfg = testing::tiny_config(1, 2);
  const ParamLayout layout(cfg);
  auto t = draw_ticket(testing::random_vector(layout.maskable_count(), 4, -5.0, 5.0), layout, 0.3);
  t.source = "seed 4";
  std::stringstream buf;
  write_ticket(t, buf);
  const auto bytes = buf.str();
  std::stringstream in(bytes);
  const auto back = read_ticket(in, layout);
  CHECK(back.keep_mask == t.keep_mask);
  CHECK(back.scores == t.scores);
  CHECK(back.target_sparsity == t.target_sparsity);
  CHECK(back.provenance == "robust");
  CHECK(back.source == "seed 4");
  CHECK(back.layer_sparsity == t.layer_sparsity);
  std::stringstream again;
  write_ticket(back, again);
  CHECK(again.str() == bytes);

  std::stringstream truncated(bytes.substr(0, bytes.size() - 5));
  CHECK_THROWS_AS(read_ticket(truncated, layout), FormatError);
  std::stringstream wrong(bytes);
  CHECK_THROWS_AS(read_ticket(wrong, ParamLayout(testing::tiny_config(2, 2))), FormatError);
}
