#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "mkr/data.hpp"

using namespace mkr;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mkr_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

std::map<std::size_t, std::pair<int, int>> label_counts(const std::vector<InteractionRecord>& rs) {
  std::map<std::size_t, std::pair<int, int>> out;
  for (const auto& r : rs) (r.value > 0.5 ? out[r.user].first : out[r.user].second)++;
  return out;
}

}  // namespace

TEST(ToImplicit, ThresholdKeepsHighRatings) {
  const std::vector<InteractionRecord> ratings{{0, 0, 5.0}, {0, 1, 3.0}};
  const auto out = to_implicit(ratings, 4.0, 10, 1);
  const auto c = label_counts(out);
  EXPECT_EQ(c.at(0).first, 1);
  EXPECT_EQ(c.at(0).second, 1);
  for (const auto& r : out) {
    if (r.value == 1.0) EXPECT_EQ(r.item, 0u);
    else EXPECT_GE(r.item, 2u);  // neither watched item may be a negative
  }
}

TEST(ToImplicit, NoThresholdMakesEveryRatingPositive) {
  const std::vector<InteractionRecord> ratings{{0, 0, 1.0}, {0, 1, 2.0}, {1, 2, 0.5}};
  const auto c = label_counts(to_implicit(ratings, std::nullopt, 10, 1));
  EXPECT_EQ(c.at(0).first, 2);
  EXPECT_EQ(c.at(1).first, 1);
}

TEST(ToImplicit, NegativesMatchPositivesPerUser) {
  std::mt19937_64 rng(3);
  std::vector<InteractionRecord> ratings;
  for (std::size_t u = 0; u < 30; ++u)
    for (std::size_t i = 0; i < 100; ++i)
      if (rng() % 7 == 0) ratings.push_back({u, i, static_cast<double>(1 + rng() % 5)});
  const auto out = to_implicit(ratings, 4.0, 100, 9);
  std::set<std::pair<std::size_t, std::size_t>> watched;
  for (const auto& r : ratings) watched.insert({r.user, r.item});
  for (const auto& [u, c] : label_counts(out)) EXPECT_EQ(c.first, c.second) << "user " << u;
  for (const auto& r : out)
    if (r.value == 0.0) {
      EXPECT_FALSE(watched.count({r.user, r.item}));
    }
}

TEST(ToImplicit, ThresholdEliminatingEverythingThrows) {
  EXPECT_THROW(to_implicit({{0, 0, 1.0}, {1, 1, 2.0}}, 4.0, 5, 1), DataError);
}

TEST(FilterAligned, AllAlignedIsIdentity) {
  Alignment a(3, 3);
  for (std::size_t i = 0; i < 3; ++i) a.link(i, i);
  const std::vector<InteractionRecord> rs{{0, 0, 1}, {0, 1, 1}, {1, 2, 1}};
  const auto f = filter_aligned(rs, a);
  EXPECT_EQ(f.records, rs);
}

TEST(FilterAligned, NoneAlignedThrows) {
  EXPECT_THROW(filter_aligned({{0, 0, 1}, {1, 1, 1}}, Alignment(2, 2)), DataError);
}

TEST(FilterAligned, MixedKeepsAlignedInteractionsAndRemapsDensely) {
  std::mt19937_64 rng(5);
  Alignment a(50, 20);
  std::vector<bool> aligned(50);
  for (std::size_t i = 0; i < 50; ++i)
    if (rng() % 3) {
      aligned[i] = true;
      a.link(i, rng() % 20);
    }
  std::vector<InteractionRecord> rs;
  std::size_t expected = 0;
  for (int n = 0; n < 400; ++n) {
    InteractionRecord r{rng() % 30, rng() % 50, 1.0};
    expected += aligned[r.item];
    rs.push_back(r);
  }
  const auto f = filter_aligned(rs, a);
  EXPECT_EQ(f.records.size(), expected);
  std::set<std::size_t> users, items;
  for (const auto& r : f.records) {
    users.insert(r.user);
    items.insert(r.item);
    EXPECT_FALSE(a.entities_of(f.item_old_ids[r.item]).empty());
  }
  EXPECT_EQ(users.size(), f.user_old_ids.size());
  EXPECT_EQ(items.size(), f.item_old_ids.size());
  EXPECT_EQ(*users.rbegin() + 1, users.size());
  EXPECT_EQ(*items.rbegin() + 1, items.size());
  // The mapping back to old ids is injective.
  EXPECT_EQ(std::set<std::size_t>(f.item_old_ids.begin(), f.item_old_ids.end()).size(), f.item_old_ids.size());
}

TEST(Split, TenRecordsGoSixTwoTwo) {
  const auto s = split_assignments(10, 4);
  EXPECT_EQ(std::count(s.begin(), s.end(), Split::train), 6);
  EXPECT_EQ(std::count(s.begin(), s.end(), Split::validation), 2);
  EXPECT_EQ(std::count(s.begin(), s.end(), Split::test), 2);
}

TEST(Split, DeterministicUnderSeed) {
  EXPECT_EQ(split_assignments(500, 8), split_assignments(500, 8));
  EXPECT_NE(split_assignments(500, 8), split_assignments(500, 9));
}

TEST(Split, ProportionsWithinOneRecordForEverySize) {
  for (std::size_t n = 5; n <= 1000; ++n) {
    const auto s = split_assignments(n, n);
    ASSERT_EQ(s.size(), n);
    const double nd = static_cast<double>(n);
    const auto tr = static_cast<double>(std::count(s.begin(), s.end(), Split::train));
    const auto va = static_cast<double>(std::count(s.begin(), s.end(), Split::validation));
    const auto te = static_cast<double>(std::count(s.begin(), s.end(), Split::test));
    ASSERT_EQ(tr + va + te, nd);
    ASSERT_LE(std::abs(tr - 0.6 * nd), 1.0) << n;
    ASSERT_LE(std::abs(va - 0.2 * nd), 1.0) << n;
    ASSERT_LE(std::abs(te - 0.2 * nd), 1.0) << n;
  }
}

TEST(Split, FewerThanFiveThrows) { EXPECT_THROW(split_assignments(4, 1), DataError); }

TEST(Split, SplitIsRoughlyUniformOverPositions) {
  // Each record lands in validation with probability 0.2 across seeds.
  std::vector<int> hits(20);
  for (std::uint64_t seed = 0; seed < 2000; ++seed) {
    const auto s = split_assignments(20, seed);
    for (std::size_t i = 0; i < 20; ++i) hits[i] += s[i] == Split::validation;
  }
  for (int h : hits) EXPECT_NEAR(h / 2000.0, 0.2, 0.04);
}

namespace {

DatasetBundle small_bundle(std::uint64_t seed = 1) {
  SyntheticOptions opt;
  opt.density = 0.2;
  opt.triples_per_entity = 3;
  return generate_synthetic(40, 60, 80, 3, 0.8, seed, opt);
}

}  // namespace

TEST(Subsample, FullRatioIsIdentity) {
  const auto b = small_bundle();
  EXPECT_EQ(subsample_training(b, 1.0, 3), b);
  EXPECT_EQ(subsample_triples(b, 1.0, 3), b);
}

TEST(Subsample, TenthOfThousand) {
  DatasetBundle b;
  b.num_users = 10;
  b.num_items = 200;
  b.alignment = Alignment(200, 0);
  for (std::size_t i = 0; i < 1000; ++i) {
    b.interactions.push_back({i % 10, i % 200, 1.0});
    b.interaction_split.push_back(Split::train);
  }
  for (std::size_t i = 0; i < 300; ++i) {
    b.interactions.push_back({i % 10, i % 200, 0.0});
    b.interaction_split.push_back(i % 2 ? Split::validation : Split::test);
  }
  const auto s = subsample_training(b, 0.1, 7);
  EXPECT_NEAR(static_cast<double>(s.interactions_in(Split::train).size()), 100.0, 1.0);
  EXPECT_EQ(s.interactions_in(Split::validation), b.interactions_in(Split::validation));
  EXPECT_EQ(s.interactions_in(Split::test), b.interactions_in(Split::test));
}

TEST(Subsample, NestedUnderSharedSeed) {
  const auto b = small_bundle();
  auto as_set = [](const DatasetBundle& x) {
    std::multiset<std::tuple<std::size_t, std::size_t, double>> s;
    for (const auto& r : x.interactions_in(Split::train)) s.insert({r.user, r.item, r.value});
    return s;
  };
  std::multiset<std::tuple<std::size_t, std::size_t, double>> prev;
  for (int k = 1; k <= 10; ++k) {
    const auto cur = as_set(subsample_training(b, k / 10.0, 11));
    EXPECT_TRUE(std::includes(cur.begin(), cur.end(), prev.begin(), prev.end())) << k;
    prev = cur;
  }
  std::set<TripleRecord> tprev;
  for (int k = 1; k <= 10; ++k) {
    const auto t = subsample_triples(b, k / 10.0, 11).triples_in(Split::train);
    const std::set<TripleRecord> cur(t.begin(), t.end());
    EXPECT_TRUE(std::includes(cur.begin(), cur.end(), tprev.begin(), tprev.end())) << k;
    tprev = cur;
  }
}

TEST(Subsample, BadRatioThrows) {
  const auto b = small_bundle();
  EXPECT_THROW(subsample_training(b, 0.0, 1), DataError);
  EXPECT_THROW(subsample_training(b, 1.5, 1), DataError);
  EXPECT_THROW(subsample_triples(b, -0.1, 1), DataError);
}

TEST(Synthetic, ZeroCorrelationGivesIndependentLatents) {
  SyntheticLatents lat;
  SyntheticOptions opt;
  opt.triples_per_entity = 2;
  generate_synthetic(20, 400, 400, 2, 0.0, 3, opt, &lat);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t j = 0; j < 400; ++j)
    for (std::size_t c = 0; c < lat.items[j].size(); ++c) {
      sxy += lat.items[j][c] * lat.entities[j][c];
      sxx += lat.items[j][c] * lat.items[j][c];
      syy += lat.entities[j][c] * lat.entities[j][c];
    }
  // 1600 independent pairs: |r| stays well under 4 standard errors.
  EXPECT_LT(std::abs(sxy / std::sqrt(sxx * syy)), 0.1);
}

TEST(Synthetic, UnitCorrelationSharesLatents) {
  SyntheticLatents lat;
  generate_synthetic(10, 30, 50, 2, 1.0, 3, {}, &lat);
  for (std::size_t j = 0; j < 30; ++j) EXPECT_EQ(lat.items[j], lat.entities[j]);
}

TEST(Synthetic, ShapeAndInvariants) {
  const auto b = small_bundle(4);
  EXPECT_NO_THROW(b.validate());
  EXPECT_EQ(b.num_entities, 80u);
  for (std::size_t i = 0; i < b.num_items; ++i) EXPECT_EQ(b.alignment.entities_of(i), std::vector<std::size_t>{i});
  EXPECT_EQ(std::set<TripleRecord>(b.triples.begin(), b.triples.end()).size(), b.triples.size());
  for (const auto& [u, c] : label_counts(b.interactions)) EXPECT_EQ(c.first, c.second) << u;
  EXPECT_EQ(small_bundle(4), b);
}

TEST(Synthetic, InvalidSizesThrow) {
  EXPECT_THROW(generate_synthetic(1, 10, 10, 1, 0.5, 1), DataError);
  EXPECT_THROW(generate_synthetic(10, 10, 5, 1, 0.5, 1), DataError);
  EXPECT_THROW(generate_synthetic(10, 10, 10, 0, 0.5, 1), DataError);
  EXPECT_THROW(generate_synthetic(10, 10, 10, 1, 1.5, 1), DataError);
}

TEST(Alignment, MapsAreMutualInverses) {
  Alignment a(4, 5);
  a.link(0, 1);
  a.link(0, 3);
  a.link(2, 3);
  a.link(0, 1);
  EXPECT_EQ(a.entities_of(0), (std::vector<std::size_t>{1, 3}));
  EXPECT_EQ(a.items_of(3), (std::vector<std::size_t>{0, 2}));
  for (auto [i, e] : a.pairs()) {
    const auto& items = a.items_of(e);
    EXPECT_NE(std::find(items.begin(), items.end(), i), items.end());
  }
}

TEST(Bundle, WriteReadRoundTrip) {
  const auto b = small_bundle(6);
  const auto dir = temp_dir("roundtrip");
  write_bundle(b, dir);
  EXPECT_EQ(read_bundle(dir), b);
}

TEST(Preprocess, EndToEndFromRawFiles) {
  const auto dir = temp_dir("raw");
  write_file(dir / "ratings.tsv",
             "# user\titem\trating\n"
             "alice\tm1\t5\nalice\tm2\t2\nalice\tm9\t5\n"
             "bob\tm2\t4\nbob\tm3\t1\n"
             "carol\tm3\t2\n"
             "dave\tm1\t4\ndave\tm3\t5\n");
  write_file(dir / "kg.tsv", "e1\tgenre\te2\ne2\tgenre\te3\ne1\tgenre\te2\ne3\tby\te4\ne4\tby\te1\ne4\tby\te2\n");
  write_file(dir / "align.tsv", "m1\te1\nm2\te2\nm3\te3\n");
  const auto raw = read_raw(dir / "ratings.tsv", dir / "kg.tsv", dir / "align.tsv");
  EXPECT_EQ(raw.triples.size(), 5u);  // duplicate dropped
  const auto b = preprocess(raw, 4.0, 1);
  // m9 has no entity; carol has no positive rating left.
  EXPECT_EQ(b.num_items, 3u);
  EXPECT_EQ(b.num_users, 3u);
  EXPECT_FALSE(b.users.find("carol").has_value());
  EXPECT_FALSE(b.items.find("m9").has_value());
  for (const auto& r : b.interactions) EXPECT_FALSE(b.alignment.entities_of(r.item).empty());
  const auto c = label_counts(b.interactions);
  EXPECT_EQ(c.at(*b.users.find("alice")).first, 1);
  EXPECT_EQ(c.at(*b.users.find("dave")).first, 2);
  // Raw ids stay recoverable after the round trip.
  write_bundle(b, dir / "bundle");
  const auto back = read_bundle(dir / "bundle");
  EXPECT_EQ(back, b);
  EXPECT_EQ(back.items.raw(b.interactions[0].item), b.items.raw(b.interactions[0].item));
}

TEST(Preprocess, MalformedRowsReportLine) {
  const auto dir = temp_dir("bad");
  write_file(dir / "ratings.tsv", "u\tm\t5\nu\tm\n");
  write_file(dir / "kg.tsv", "a\tr\tb\n");
  write_file(dir / "align.tsv", "m\ta\n");
  try {
    read_raw(dir / "ratings.tsv", dir / "kg.tsv", dir / "align.tsv");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
  write_file(dir / "ratings.tsv", "u\tm\tfive\n");
  EXPECT_THROW(read_raw(dir / "ratings.tsv", dir / "kg.tsv", dir / "align.tsv"), DataError);
  EXPECT_THROW(read_raw(dir / "missing.tsv", dir / "kg.tsv", dir / "align.tsv"), DataError);
}

TEST(Bundle, ValidateRejectsBrokenBundles) {
  auto b = small_bundle(2);
  b.interaction_split.pop_back();
  EXPECT_THROW(b.validate(), DataError);
  b = small_bundle(2);
  b.interactions[0].item = b.num_items;
  EXPECT_THROW(b.validate(), DataError);
  b = small_bundle(2);
  b.triples[0].relation = b.num_relations;
  EXPECT_THROW(b.validate(), DataError);
}

TEST(IdMap, RemappingIsBijective) {
  IdMap m;
  for (const char* s : {"x", "y", "z", "x"}) m.intern(s);
  EXPECT_EQ(m.size(), 3u);
  const IdMap r = m.remapped({2, 0});
  EXPECT_EQ(r.raw(0), "z");
  EXPECT_EQ(r.raw(1), "x");
  EXPECT_EQ(*r.find("x"), 1u);
  EXPECT_FALSE(r.find("y").has_value());
}
