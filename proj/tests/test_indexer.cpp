#include <gtest/gtest.h>

#include <filesystem>
#include <unistd.h>

#include "oracles.hpp"
#include "pi2i/coclick.hpp"
#include "pi2i/i2i_table.hpp"
#include "pi2i/swing.hpp"

using namespace pi2i;
namespace fs = std::filesystem;

namespace {

UserHistory history_of(Id user, std::initializer_list<Id> items) {
  UserHistory h;
  h.user_id = user;
  Timestamp ts = 0;
  for (Id item : items) {
    Interaction e;
    e.user_id = user;
    e.item_id = item;
    e.timestamp = ++ts;
    h.events.push_back(e);
  }
  return h;
}

TEST(CoClicks, EmptyInput) {
  CoClickStats stats = accumulate_coclicks({});
  EXPECT_TRUE(stats.users_by_item.empty());
  EXPECT_TRUE(stats.items_by_user.empty());
  EXPECT_TRUE(stats.coclick_count.empty());
}

TEST(CoClicks, SingleUserSinglePair) {
  CoClickStats stats = accumulate_coclicks({history_of(1, {10, 20})});
  EXPECT_EQ(stats.coclicks(10, 20), 1u);
  EXPECT_EQ(stats.coclicks(20, 10), 1u);
  ASSERT_NE(stats.users_of(10), nullptr);
  EXPECT_EQ(*stats.users_of(10), std::vector<Id>{1});
  EXPECT_EQ(*stats.users_of(20), std::vector<Id>{1});
  EXPECT_EQ(*stats.items_of(1), (std::vector<Id>{10, 20}));
}

TEST(CoClicks, RepeatedClicksCountOnce) {
  CoClickStats stats = accumulate_coclicks({history_of(1, {10, 20, 10, 10, 20})});
  EXPECT_EQ(stats.coclicks(10, 20), 1u);
  EXPECT_EQ(stats.items_of(1)->size(), 2u);
}

TEST(CoClicks, MatchesBruteForceOnRandomData) {
  Rng rng(11);
  auto histories = oracle::random_histories(rng, 20, 25, 0.3);
  CoClickStats stats = accumulate_coclicks(histories);
  oracle::NaiveSets sets = oracle::naive_sets(histories);

  // Transpose invariant.
  for (const auto& [item, users] : stats.users_by_item)
    for (Id u : users) {
      const auto* items = stats.items_of(u);
      ASSERT_NE(items, nullptr);
      EXPECT_TRUE(std::binary_search(items->begin(), items->end(), item));
    }

  // coclick_count(i, j) == |U_i ∩ U_j| for every item pair.
  for (const auto& [i, ui] : sets.users_of_item)
    for (const auto& [j, uj] : sets.users_of_item) {
      if (i >= j) continue;
      std::vector<Id> shared;
      std::set_intersection(ui.begin(), ui.end(), uj.begin(), uj.end(),
                            std::back_inserter(shared));
      EXPECT_EQ(stats.coclicks(i, j), shared.size()) << "pair " << i << "," << j;
    }
}

TEST(CoClicks, WindowLimitsPairs) {
  // 1..5 in a row: window 1 pairs only adjacent items.
  CoClickStats stats = accumulate_coclicks({history_of(1, {1, 2, 3, 4, 5})}, 1);
  EXPECT_EQ(stats.coclicks(1, 2), 1u);
  EXPECT_EQ(stats.coclicks(2, 3), 1u);
  EXPECT_EQ(stats.coclicks(1, 3), 0u);
  EXPECT_EQ(stats.coclicks(1, 5), 0u);
  // Sets are unaffected by the window.
  EXPECT_EQ(stats.items_of(1)->size(), 5u);
}

TEST(CoClicks, UserItemCapKeepsMostRecent) {
  CoClickStats stats = accumulate_coclicks({history_of(1, {1, 2, 3, 4, 5})}, 0, 3);
  EXPECT_EQ(*stats.items_of(1), (std::vector<Id>{3, 4, 5}));
  EXPECT_EQ(stats.coclicks(1, 2), 0u);
  EXPECT_EQ(stats.coclicks(4, 5), 1u);
  EXPECT_EQ(stats.users_of(1), nullptr);
}

TEST(SwingScore, EmptyIntersectionIsZero) {
  CoClickStats stats = accumulate_coclicks({history_of(1, {10, 20}), history_of(2, {30, 40})});
  EXPECT_EQ(swing_score(10, 30, stats, 1.0, true), 0.0);
}

TEST(SwingScore, SingleSharedUserHandValue) {
  // One user with I_u = {i, j}: only the (u, u) pair contributes,
  // w_u^2 / (1 + |I_u|) = (1/2) * (1/3) = 1/6.
  CoClickStats stats = accumulate_coclicks({history_of(1, {10, 20})});
  EXPECT_NEAR(swing_score(10, 20, stats, 1.0, true), 1.0 / 6.0, 1e-15);
  // Excluding u = v pairs leaves nothing.
  EXPECT_EQ(swing_score(10, 20, stats, 1.0, true, true), 0.0);
}

TEST(SwingScore, TwoSharedUsersHandValue) {
  // Two users, both with I = {i, j}: 4 ordered pairs, each (1/2)/(1+2) = 1/6.
  CoClickStats stats = accumulate_coclicks({history_of(1, {10, 20}), history_of(2, {10, 20})});
  EXPECT_NEAR(swing_score(10, 20, stats, 1.0, true), 2.0 / 3.0, 1e-15);
  // u != v only: 2 ordered pairs -> 1/3.
  EXPECT_NEAR(swing_score(10, 20, stats, 1.0, true, true), 1.0 / 3.0, 1e-15);
  // Unweighted drops the 1/sqrt terms: 4 * 1/3.
  EXPECT_NEAR(swing_score(10, 20, stats, 1.0, false), 4.0 / 3.0, 1e-15);
}

TEST(SwingScore, SelfSimilarityRejected) {
  CoClickStats stats = accumulate_coclicks({history_of(1, {10, 20})});
  EXPECT_THROW(swing_score(10, 10, stats, 1.0, true), std::invalid_argument);
}

TEST(SwingScore, SymmetryOnRandomData) {
  Rng rng(5);
  auto histories = oracle::random_histories(rng, 15, 20, 0.3);
  CoClickStats stats = accumulate_coclicks(histories);
  for (Id i = 1; i <= 20; ++i)
    for (Id j = static_cast<Id>(i + 1); j <= 20; ++j) {
      const double a = swing_score(i, j, stats, 1.0, true);
      const double b = swing_score(j, i, stats, 1.0, true);
      EXPECT_EQ(a, b);
    }
}

TEST(SwingScore, WeightingBound) {
  Rng rng(9);
  auto histories = oracle::random_histories(rng, 15, 20, 0.3);
  CoClickStats stats = accumulate_coclicks(histories);
  for (Id i = 1; i <= 20; ++i)
    for (Id j = static_cast<Id>(i + 1); j <= 20; ++j)
      EXPECT_LE(swing_score(i, j, stats, 1.0, true),
                swing_score(i, j, stats, 1.0, false) + 1e-12);
}

TEST(BuildIndex, SingleEdgeGraph) {
  auto histories = std::vector<UserHistory>{history_of(1, {10, 20})};
  IndexerConfig cfg;
  cfg.truncation_size = 5;
  I2ITable table = build_index(histories, cfg);
  ASSERT_EQ(table.entries.size(), 2u);
  const double s = swing_score(10, 20, accumulate_coclicks(histories), 1.0, true);
  ASSERT_EQ(table.entries.at(10).size(), 1u);
  EXPECT_EQ(table.entries.at(10)[0].target, 20);
  EXPECT_EQ(table.entries.at(10)[0].score, s);
  EXPECT_EQ(table.entries.at(10)[0].rank, 1u);
  EXPECT_EQ(table.entries.at(20)[0].target, 10);
  EXPECT_EQ(table.entries.at(20)[0].score, s);
}

TEST(BuildIndex, TruncationKeepsTopTwo) {
  // Item 1 co-clicked with 5 neighbors at different strengths.
  std::vector<UserHistory> histories;
  Id user = 1;
  for (Id nb = 2; nb <= 6; ++nb)
    for (Id copies = 0; copies < nb; ++copies)  // heavier neighbors co-click more often
      histories.push_back(history_of(user++, {1, nb}));
  IndexerConfig cfg;
  cfg.truncation_size = 2;
  I2ITable table = build_index(histories, cfg);

  auto naive = oracle::naive_index(histories, cfg.alpha, 2, cfg.weighted, cfg.exclude_self_pairs);
  const auto& row = table.entries.at(1);
  ASSERT_EQ(row.size(), 2u);
  ASSERT_EQ(naive.at(1).size(), 2u);
  for (std::size_t r = 0; r < 2; ++r) {
    EXPECT_EQ(row[r].target, naive.at(1)[r].target);
    EXPECT_NEAR(row[r].score, naive.at(1)[r].score, 1e-12);
  }
}

void expect_matches_naive(const std::vector<UserHistory>& histories, const IndexerConfig& cfg) {
  I2ITable table = build_index(histories, cfg);
  auto naive = oracle::naive_index(histories, cfg.alpha, cfg.truncation_size, cfg.weighted,
                                   cfg.exclude_self_pairs, cfg.min_score);
  ASSERT_EQ(table.entries.size(), naive.size());
  for (const auto& [trigger, expected] : naive) {
    const auto* actual = table.targets_of(trigger);
    ASSERT_NE(actual, nullptr) << "trigger " << trigger;
    ASSERT_EQ(actual->size(), expected.size()) << "trigger " << trigger;
    for (std::size_t r = 0; r < expected.size(); ++r) {
      EXPECT_EQ((*actual)[r].target, expected[r].target) << "trigger " << trigger << " rank " << r;
      EXPECT_NEAR((*actual)[r].score, expected[r].score, 1e-9);
      EXPECT_EQ((*actual)[r].rank, r + 1);
    }
  }
}

TEST(BuildIndex, OracleEquivalenceAllVariants) {
  Rng rng(2024);
  for (int round = 0; round < 4; ++round) {
    auto histories = oracle::random_histories(rng, 20, 18, 0.25);
    for (bool weighted : {true, false})
      for (bool exclude : {true, false}) {
        IndexerConfig cfg;
        cfg.truncation_size = 7;
        cfg.weighted = weighted;
        cfg.exclude_self_pairs = exclude;
        expect_matches_naive(histories, cfg);
      }
  }
}

TEST(BuildIndex, MinScoreFilters) {
  Rng rng(3);
  auto histories = oracle::random_histories(rng, 20, 15, 0.3);
  IndexerConfig cfg;
  cfg.truncation_size = 100;
  cfg.min_score = 0.2;
  I2ITable table = build_index(histories, cfg);
  for (const auto& [_, row] : table.entries)
    for (const auto& e : row) EXPECT_GE(e.score, 0.2);
  expect_matches_naive(histories, cfg);
}

TEST(BuildIndex, InvariantsHold) {
  Rng rng(17);
  auto histories = oracle::random_histories(rng, 25, 20, 0.3);
  IndexerConfig cfg;
  cfg.truncation_size = 6;
  I2ITable table = build_index(histories, cfg);
  for (const auto& [trigger, row] : table.entries) {
    EXPECT_LE(row.size(), cfg.truncation_size);
    for (std::size_t r = 0; r < row.size(); ++r) {
      EXPECT_NE(row[r].target, trigger);
      EXPECT_GT(row[r].score, 0.0);
      EXPECT_EQ(row[r].rank, r + 1);
      if (r > 0) EXPECT_GE(row[r - 1].score, row[r].score);
    }
  }
}

TEST(BuildIndex, PrefixPropertyAcrossTruncationSizes) {
  Rng rng(21);
  auto histories = oracle::random_histories(rng, 30, 20, 0.4);
  IndexerConfig small_cfg, large_cfg;
  small_cfg.truncation_size = 3;
  large_cfg.truncation_size = 10;
  I2ITable small = build_index(histories, small_cfg);
  I2ITable large = build_index(histories, large_cfg);
  ASSERT_EQ(small.entries.size(), large.entries.size());
  for (const auto& [trigger, small_row] : small.entries) {
    const auto* large_row = large.targets_of(trigger);
    ASSERT_NE(large_row, nullptr);
    ASSERT_GE(large_row->size(), small_row.size());
    for (std::size_t r = 0; r < small_row.size(); ++r)
      EXPECT_EQ(small_row[r], (*large_row)[r]);
  }
  I2ITable retruncated = large.truncated(3);
  retruncated.truncation_size = small.truncation_size;
  EXPECT_EQ(retruncated.entries, small.entries);
}

TEST(BuildIndex, ThreadCountDoesNotChangeResult) {
  Rng rng(33);
  auto histories = oracle::random_histories(rng, 30, 25, 0.35);
  IndexerConfig cfg;
  cfg.truncation_size = 8;
  cfg.threads = 1;
  I2ITable sequential = build_index(histories, cfg);
  cfg.threads = 4;
  I2ITable parallel = build_index(histories, cfg);
  EXPECT_EQ(sequential, parallel);
}

TEST(BuildIndex, DefaultTruncationIsProductionValue) {
  EXPECT_EQ(IndexerConfig{}.truncation_size, 1250u);
}

class IndexIoTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("pi2i_idx_" + std::to_string(::getpid()));
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }
  fs::path dir_;
};

TEST_F(IndexIoTest, EmptyTableRoundTrip) {
  I2ITable table;
  table.truncation_size = 42;
  table.alpha = 0.5;
  table.weighted = false;
  save_index(table, path("empty.tsv"));
  EXPECT_EQ(load_index(path("empty.tsv")), table);
}

TEST_F(IndexIoTest, RandomTableRoundTripExact) {
  Rng rng(99);
  I2ITable table;
  table.truncation_size = 50;
  table.alpha = 1.25;
  table.weighted = true;
  for (Id trigger = 1; trigger <= 40; ++trigger) {
    std::vector<IndexEntry> row;
    double score = 100.0;
    std::set<Id> used;
    const std::size_t len = 1 + rng.below(25);
    for (std::size_t r = 0; r < len; ++r) {
      score *= rng.uniform(0.5, 0.999999);
      Id target;
      do {
        target = static_cast<Id>(1000 + rng.below(1000));
      } while (!used.insert(target).second);
      row.push_back({target, score, static_cast<std::uint32_t>(r + 1)});
    }
    table.entries[trigger] = std::move(row);
  }
  save_index(table, path("random.tsv"));
  EXPECT_EQ(load_index(path("random.tsv")), table);
}

TEST_F(IndexIoTest, TiedScoresPreserveOrder) {
  I2ITable table;
  table.truncation_size = 10;
  table.entries[1] = {{5, 2.0, 1}, {7, 2.0, 2}, {9, 2.0, 3}};
  save_index(table, path("ties.tsv"));
  EXPECT_EQ(load_index(path("ties.tsv")), table);
}

TEST_F(IndexIoTest, VersionMismatchRejected) {
  std::ofstream out(path("bad.tsv"));
  out << "#pi2i-index v9 alpha=1 T=10 weighted=1\n";
  out.close();
  EXPECT_THROW(load_index(path("bad.tsv")), IoError);
}

TEST_F(IndexIoTest, CorruptedRowsRejected) {
  {
    std::ofstream out(path("corrupt.tsv"));
    out << "#pi2i-index v1 alpha=1 T=10 weighted=1\n";
    out << "1\t2\tnot_a_number\t1\n";
  }
  EXPECT_THROW(load_index(path("corrupt.tsv")), IoError);
  {
    std::ofstream out(path("gap.tsv"));
    out << "#pi2i-index v1 alpha=1 T=10 weighted=1\n";
    out << "1\t2\t3.0\t1\n1\t5\t2.5\t3\n";  // rank gap
  }
  EXPECT_THROW(load_index(path("gap.tsv")), IoError);
  {
    std::ofstream out(path("order.tsv"));
    out << "#pi2i-index v1 alpha=1 T=10 weighted=1\n";
    out << "1\t2\t3.0\t1\n1\t5\t4.5\t2\n";  // score increases with rank
  }
  EXPECT_THROW(load_index(path("order.tsv")), IoError);
  EXPECT_THROW(load_index(path("missing.tsv")), IoError);
}

}  // namespace
