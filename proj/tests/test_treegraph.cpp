#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>
#include <set>

#include "treeclstm/treegraph.hpp"

using namespace treeclstm;

namespace {

TreeGraph random_tree(std::mt19937_64& rng, std::size_t n) {
  std::vector<NodeId> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::vector<NodeId>> children(n);
  for (std::size_t j = 1; j < n; ++j) {
    std::uniform_int_distribution<std::size_t> pick(0, j - 1);
    children[perm[pick(rng)]].push_back(perm[j]);
  }
  return TreeGraph(perm[0], std::move(children));
}

std::vector<std::size_t> positions(const std::vector<NodeId>& order) {
  std::vector<std::size_t> pos(order.size());
  for (std::size_t k = 0; k < order.size(); ++k) pos[order[k]] = k;
  return pos;
}

void expect_children_first(const TreeGraph& tree, const std::vector<NodeId>& order) {
  auto pos = positions(order);
  for (NodeId j = 0; j < tree.node_count(); ++j)
    for (NodeId c : tree.children(j)) EXPECT_LT(pos[c], pos[j]);
}

// All-pairs tree distances by Floyd-Warshall over the undirected edge set.
std::vector<std::vector<std::size_t>> all_pairs(const TreeGraph& tree) {
  const std::size_t n = tree.node_count(), inf = 1u << 20;
  std::vector<std::vector<std::size_t>> d(n, std::vector<std::size_t>(n, inf));
  for (NodeId j = 0; j < n; ++j) {
    d[j][j] = 0;
    for (NodeId c : tree.children(j)) d[j][c] = d[c][j] = 1;
  }
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) d[i][j] = std::min(d[i][j], d[i][k] + d[k][j]);
  return d;
}

// Maximal unary chains by enumerating every downward path.
std::set<std::vector<NodeId>> brute_force_chains(const TreeGraph& tree) {
  std::set<std::vector<NodeId>> out;
  for (NodeId start = 0; start < tree.node_count(); ++start) {
    auto p = tree.parent(start);
    if (p && !tree.is_branching(*p)) continue;
    // Extend every downward path from `start`; keep the ones that end at a
    // node without exactly one child and pass only through unary nodes.
    std::vector<std::vector<NodeId>> frontier{{start}};
    while (!frontier.empty()) {
      auto path = frontier.back();
      frontier.pop_back();
      const NodeId last = path.back();
      if (tree.children(last).size() != 1) {
        out.insert(path);
        continue;
      }
      for (NodeId c : tree.children(last)) {
        auto next = path;
        next.push_back(c);
        frontier.push_back(next);
      }
    }
  }
  return out;
}

}  // namespace

TEST(TreeGraph, ValidationErrors) {
  EXPECT_THROW(TreeGraph(0, {{1}, {0}}), StructureError);        // cycle through the root
  EXPECT_THROW(TreeGraph(0, {{1}, {2}, {1}}), StructureError);   // node 1 has two parents
  EXPECT_THROW(TreeGraph(0, {{1, 1}, {}}), StructureError);      // duplicate child
  EXPECT_THROW(TreeGraph(0, {{1}, {}, {}}), StructureError);     // orphan 2
  EXPECT_THROW(TreeGraph(0, {{}, {2}, {1}}), StructureError);    // detached cycle 1<->2
  EXPECT_THROW(TreeGraph(0, {{5}}), StructureError);
  EXPECT_THROW(TreeGraph(3, {{}}), StructureError);
}

TEST(TreeGraph, JsonRoundTrip) {
  TreeGraph t = tree_moving_mnist_topology();
  nlohmann::json j = t.to_json();
  EXPECT_EQ(j["nodes"], 15);
  EXPECT_EQ(j["root"], 14);
  EXPECT_EQ(TreeGraph::from_json(nlohmann::json::parse(j.dump())), t);
  EXPECT_THROW(TreeGraph::from_json(nlohmann::json{{"nodes", 2}, {"root", 0}, {"children", {{1}}}}), StructureError);
  EXPECT_THROW(TreeGraph::from_json(nlohmann::json{{"root", 0}}), StructureError);
}

TEST(Schedule, SmallCases) {
  EXPECT_EQ(topological_schedule(TreeGraph(0, {{}})), std::vector<NodeId>{0});
  // a <- b <- c with c the leaf
  EXPECT_EQ(topological_schedule(TreeGraph::chain(3)), (std::vector<NodeId>{2, 1, 0}));
}

TEST(Schedule, BenchmarkTopology) {
  TreeGraph t = tree_moving_mnist_topology();
  auto order = topological_schedule(t);
  ASSERT_EQ(order.size(), 15u);
  EXPECT_EQ(order.back(), t.root());
  expect_children_first(t, order);
  auto pos = positions(order);
  // leaves precede the merge nodes they feed
  EXPECT_LT(pos[0], pos[9]);
  EXPECT_LT(pos[3], pos[9]);
  for (NodeId leaf : t.leaves()) EXPECT_LT(pos[leaf], pos[12]);
  EXPECT_EQ(t.leaves(), (std::vector<NodeId>{0, 3, 6}));
}

TEST(Schedule, RandomTreesArePermutations) {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 200; ++trial) {
    std::uniform_int_distribution<std::size_t> size(1, 64);
    TreeGraph t = random_tree(rng, size(rng));
    auto order = topological_schedule(t);
    auto sorted = order;
    std::sort(sorted.begin(), sorted.end());
    std::vector<NodeId> ids(t.node_count());
    std::iota(ids.begin(), ids.end(), 0);
    EXPECT_EQ(sorted, ids);
    expect_children_first(t, order);
    EXPECT_EQ(topological_schedule(t), order);
  }
}

TEST(Schedule, ReversedChainScheduleIsRootToLeaf) {
  for (std::size_t n = 1; n <= 64; n += 7) {
    TreeGraph t = TreeGraph::chain(n);
    auto order = topological_schedule(t);
    std::reverse(order.begin(), order.end());
    NodeId cur = t.root();
    for (std::size_t k = 0; k < n; ++k) {
      EXPECT_EQ(order[k], cur);
      if (!t.is_leaf(cur)) cur = t.children(cur).front();
    }
  }
}

TEST(BranchDecompose, BenchmarkHasFiveChainsOfThree) {
  auto chains = branch_decompose(tree_moving_mnist_topology());
  ASSERT_EQ(chains.size(), 5u);
  for (const auto& c : chains) EXPECT_EQ(c.size(), 3u);
  EXPECT_EQ(chains.front(), (std::vector<NodeId>{14, 13, 12}));
}

TEST(BranchDecompose, ChainAndStar) {
  EXPECT_EQ(branch_decompose(TreeGraph::chain(6)).size(), 1u);
  for (std::size_t k = 2; k <= 6; ++k) {
    std::vector<std::vector<NodeId>> children(k + 1);
    for (NodeId l = 1; l <= k; ++l) children[0].push_back(l);
    TreeGraph star(0, children);
    auto chains = branch_decompose(star);
    EXPECT_EQ(chains.size(), k + 1);
    std::set<std::vector<NodeId>> got(chains.begin(), chains.end());
    EXPECT_EQ(got, brute_force_chains(star));
  }
}

TEST(BranchDecompose, RandomTreesMatchPathEnumeration) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    std::uniform_int_distribution<std::size_t> size(1, 40);
    TreeGraph t = random_tree(rng, size(rng));
    auto chains = branch_decompose(t);
    std::vector<NodeId> all;
    for (const auto& c : chains) all.insert(all.end(), c.begin(), c.end());
    std::sort(all.begin(), all.end());
    ASSERT_EQ(all.size(), t.node_count());
    for (std::size_t k = 0; k < all.size(); ++k) EXPECT_EQ(all[k], k);
    std::set<std::vector<NodeId>> got(chains.begin(), chains.end());
    EXPECT_EQ(got, brute_force_chains(t));
  }
}

TEST(Bifurcation, DegenerateCases) {
  EXPECT_TRUE(bifurcation_neighborhood(TreeGraph::chain(10), 4).empty());
  TreeGraph t = tree_moving_mnist_topology();
  EXPECT_EQ(bifurcation_neighborhood(t, 0), (std::vector<NodeId>{9, 12}));
}

TEST(Bifurcation, MatchesAllPairsOracle) {
  std::mt19937_64 rng(3);
  std::vector<TreeGraph> trees{tree_moving_mnist_topology()};
  for (int i = 0; i < 30; ++i) trees.push_back(random_tree(rng, 1 + rng() % 50));
  for (const TreeGraph& t : trees) {
    auto d = all_pairs(t);
    for (std::size_t radius : {0u, 1u, 2u, 4u}) {
      std::vector<NodeId> want;
      for (NodeId j = 0; j < t.node_count(); ++j) {
        bool near = false;
        for (NodeId b = 0; b < t.node_count(); ++b) near = near || (t.is_branching(b) && d[j][b] <= radius);
        if (near) want.push_back(j);
      }
      EXPECT_EQ(bifurcation_neighborhood(t, radius), want);
    }
  }
  // Every benchmark node is at most 3 edges from node 9 or node 12.
  EXPECT_EQ(bifurcation_neighborhood(tree_moving_mnist_topology(), 4).size(), 15u);
  EXPECT_EQ(bifurcation_neighborhood(tree_moving_mnist_topology(), 1), (std::vector<NodeId>{2, 5, 8, 9, 10, 11, 12, 13}));
}
