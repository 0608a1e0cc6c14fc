#include <catch2/catch_amalgamated.hpp>

#include <cstddef>
#include <vector>

#include "nsti/metrics.hpp"

using namespace nsti;

namespace {

struct Script {
  std::size_t cost = 0, s = 0, i = 0, d = 0;
};

// Walks every complete edit script aligning ref to hyp (no dynamic
// programming) and keeps the winner under the declared preference: minimal
// cost, then most substitutions, then most deletions.
void enumerate_scripts(const std::vector<int>& ref, const std::vector<int>& hyp,
                       std::size_t i, std::size_t j, Script acc, Script& best,
                       bool& seeded) {
  if (i == ref.size() && j == hyp.size()) {
    const bool wins =
        !seeded || acc.cost < best.cost ||
        (acc.cost == best.cost &&
         (acc.s > best.s || (acc.s == best.s && acc.d > best.d)));
    if (wins) best = acc;
    seeded = true;
    return;
  }
  if (i < ref.size() && j < hyp.size()) {
    Script diag = acc;
    if (ref[i] != hyp[j]) {
      ++diag.cost;
      ++diag.s;
    }
    enumerate_scripts(ref, hyp, i + 1, j + 1, diag, best, seeded);
  }
  if (i < ref.size()) {
    Script del = acc;
    ++del.cost;
    ++del.d;
    enumerate_scripts(ref, hyp, i + 1, j, del, best, seeded);
  }
  if (j < hyp.size()) {
    Script ins = acc;
    ++ins.cost;
    ++ins.i;
    enumerate_scripts(ref, hyp, i, j + 1, ins, best, seeded);
  }
}

Script oracle(const std::vector<int>& ref, const std::vector<int>& hyp) {
  Script best;
  bool seeded = false;
  enumerate_scripts(ref, hyp, 0, 0, Script{}, best, seeded);
  return best;
}

std::vector<std::vector<int>> all_sequences(int alphabet, std::size_t max_len) {
  std::vector<std::vector<int>> out = {{}};
  std::vector<std::vector<int>> frontier = {{}};
  for (std::size_t len = 1; len <= max_len; ++len) {
    std::vector<std::vector<int>> next;
    for (const auto& seq : frontier)
      for (int a = 0; a < alphabet; ++a) {
        auto grown = seq;
        grown.push_back(a);
        next.push_back(grown);
      }
    out.insert(out.end(), next.begin(), next.end());
    frontier = std::move(next);
  }
  return out;
}

}  // namespace

TEST_CASE("wer forced-alignment examples") {
  auto r = metrics::wer({0, 1, 2}, {0, 1, 2});
  REQUIRE(r.substitutions == 0);
  REQUIRE(r.insertions == 0);
  REQUIRE(r.deletions == 0);
  REQUIRE(r.wer == 0.0);

  r = metrics::wer({0, 1, 2}, {0, 2});
  REQUIRE(r.deletions == 1);
  REQUIRE(r.substitutions == 0);
  REQUIRE(r.insertions == 0);
  REQUIRE(r.wer == Catch::Approx(1.0 / 3.0));

  r = metrics::wer({0, 1}, {1, 1});
  REQUIRE(r.substitutions == 1);
  REQUIRE(r.wer == 0.5);

  r = metrics::wer({}, {4, 4});
  REQUIRE(r.insertions == 2);
  REQUIRE(r.ref_len == 0);
  REQUIRE(r.wer == 2.0);  // normalized by max(1, ref_len)

  r = metrics::wer({7}, {});
  REQUIRE(r.deletions == 1);
  REQUIRE(r.wer == 1.0);
}

TEST_CASE("wer matches the exhaustive edit-script oracle up to length 4") {
  const auto seqs = all_sequences(3, 4);
  REQUIRE(seqs.size() == 121);
  for (const auto& ref : seqs) {
    for (const auto& hyp : seqs) {
      const Script want = oracle(ref, hyp);
      const auto got = metrics::wer(ref, hyp);
      REQUIRE(got.substitutions + got.insertions + got.deletions == want.cost);
      REQUIRE(got.substitutions == want.s);
      REQUIRE(got.insertions == want.i);
      REQUIRE(got.deletions == want.d);
      REQUIRE(got.substitutions + got.deletions <= ref.size());
    }
  }
}

TEST_CASE("pooled counts give a corpus-level rate") {
  auto a = metrics::wer({0, 1, 2}, {0, 2});       // 1 edit / 3
  auto b = metrics::wer({0, 1}, {1, 1});          // 1 edit / 2
  auto pooled = metrics::pool({a, b});
  REQUIRE(pooled.ref_len == 5);
  REQUIRE(pooled.wer == Catch::Approx(2.0 / 5.0));
  REQUIRE(metrics::pool({}).wer == 0.0);
}

TEST_CASE("werr arithmetic and undefined baseline") {
  REQUIRE(metrics::werr(0.10, 0.08) == Catch::Approx(0.20));
  REQUIRE(metrics::werr(0.25, 0.25) == 0.0);
  REQUIRE_THROWS_AS(metrics::werr(0.0, 0.1), std::invalid_argument);
}

TEST_CASE("rtf ratio and frame clock") {
  REQUIRE(metrics::rtf(10.0, 100.0) == Catch::Approx(0.1));
  REQUIRE_THROWS_AS(metrics::rtf(1.0, 0.0), std::invalid_argument);
  REQUIRE(metrics::frames_to_seconds(512) == Catch::Approx(5.12));
}
