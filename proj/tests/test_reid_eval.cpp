#include "himpc/himpc.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cstdlib>

using namespace himpc;

namespace {

std::vector<Embedded> embedded(const Matrix& rows, const std::vector<int>& ids, const std::string& prefix) {
  std::vector<Embedded> out;
  for (Eigen::Index i = 0; i < rows.rows(); ++i)
    out.push_back({prefix + std::to_string(i), ids[static_cast<std::size_t>(i)], rows.row(i).transpose()});
  return out;
}

ModelParams params_for(int J, int embed, int heads, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return init_params(partition_sizes(builtin_partitions(J)), embed, heads, false, rng);
}

}  // namespace

TEST(Msmr, DimensionAndHeadMean) {
  const auto parts = builtin_partitions(20);
  const auto p = params_for(20, 8, 3, 1);
  const auto seq = generate_synthetic({})[0];
  const Vector m = build_msmr(p, parts, seq.frames);
  ASSERT_EQ(m.size(), 24);
  for (int l = 0; l < kLevels; ++l) {
    const Vector v = tap(encode_frames(p, l, level_representation(seq.frames, parts[l])));
    Vector mean = Vector::Zero(8);
    for (const auto& H : p.instance_heads[l]) mean += H * v;
    mean /= 3.0;
    EXPECT_LT((m.segment(8 * l, 8) - mean).cwiseAbs().maxCoeff(), 1e-12);
    // head mean commutes with temporal pooling
    const Matrix z = encode_frames(p, l, level_representation(seq.frames, parts[l]));
    Matrix per_frame = Matrix::Zero(z.rows(), 8);
    for (const auto& H : p.instance_heads[l]) per_frame += meta_transform(H, z);
    EXPECT_LT((tap(per_frame) / 3.0 - mean).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Msmr, IdentityHeadGivesPooledInstances) {
  const auto parts = builtin_partitions(25);
  auto p = params_for(25, 6, 1, 2);
  for (int l = 0; l < kLevels; ++l) p.instance_heads[l][0].setIdentity();
  SyntheticOptions o;
  o.joints = 25;
  const auto seq = generate_synthetic(o)[3];
  const Vector m = build_msmr(p, parts, seq.frames);
  for (int l = 0; l < kLevels; ++l)
    EXPECT_EQ(m.segment(6 * l, 6), tap(encode_frames(p, l, level_representation(seq.frames, parts[l]))));
}

TEST(Msmr, ZeroParamsGiveZeroVector) {
  const auto parts = builtin_partitions(20);
  const auto p = zeros_like(params_for(20, 5, 2, 3));
  EXPECT_EQ(build_msmr(p, parts, generate_synthetic({})[0].frames), Vector::Zero(15));
}

TEST(Msmr, ActiveLevelsOnlyAndJointCheck) {
  const auto parts = builtin_partitions(20);
  const auto p = params_for(20, 4, 2, 4);
  const auto seq = generate_synthetic({})[0];
  MsmrOptions only_joint;
  only_joint.levels = {true, false, false};
  EXPECT_EQ(build_msmr(p, parts, seq.frames, only_joint).size(), 4);
  EXPECT_EQ(build_msmr(p, parts, seq.frames, only_joint), build_msmr(p, parts, seq.frames).head(4));
  EXPECT_THROW(build_msmr(p, parts, Matrix::Zero(6, 57)), ValidationError);
}

TEST(Match, SelfMatch) {
  std::mt19937_64 rng(1);
  const Matrix x = oracle::random_matrix(6, 4, rng);
  const std::vector<int> ids{0, 1, 2, 3, 4, 5};
  const auto r = match(embedded(x, ids, "p"), embedded(x, ids, "g"));
  EXPECT_EQ(r.r1, 1.0);
  EXPECT_EQ(r.map, 1.0);
  EXPECT_EQ(r.probes[2].nearest_seq_id, "g2");
  EXPECT_EQ(r.probes[2].nearest_distance, 0.0);
}

TEST(Match, HandCaseRankTwoOfThree) {
  Matrix probe(1, 1), gallery(3, 1);
  probe << 0.0;
  gallery << 1.0, 2.0, 3.0;
  const auto r = match(embedded(probe, {7}, "p"), embedded(gallery, {1, 7, 2}, "g"));
  EXPECT_EQ(r.r1, 0.0);
  EXPECT_EQ(r.r5, 1.0);
  EXPECT_EQ(r.probes[0].first_correct_rank, 2);
  EXPECT_DOUBLE_EQ(r.map, 0.5);
  EXPECT_EQ(r.curve, (std::vector<double>{0.0, 1.0, 1.0}));
}

TEST(Match, TiesFollowGalleryOrder) {
  Matrix probe(1, 1), gallery(2, 1);
  probe << 0.0;
  gallery << 1.0, -1.0;
  EXPECT_EQ(match(embedded(probe, {1}, "p"), embedded(gallery, {0, 1}, "g")).r1, 0.0);
  EXPECT_EQ(match(embedded(probe, {1}, "p"), embedded(gallery, {1, 0}, "g")).r1, 1.0);
}

TEST(Match, MatchesExhaustiveOracle) {
  std::mt19937_64 rng(20);
  std::uniform_int_distribution<int> id(0, 7);
  for (int trial = 0; trial < 10; ++trial) {
    Matrix P = oracle::random_matrix(20, 6, rng), G = oracle::random_matrix(50, 6, rng);
    // a few exact duplicates force distance ties
    G.row(7) = G.row(3);
    P.row(1) = G.row(10);
    std::vector<int> pid(20), gid(50);
    for (auto& v : pid) v = id(rng);
    for (auto& v : gid) v = id(rng);
    const auto r = match(embedded(P, pid, "p"), embedded(G, gid, "g"));
    const auto ref = oracle::retrieval(oracle::to_mat(P), pid, oracle::to_mat(G), gid);
    ASSERT_EQ(r.curve.size(), ref.curve.size());
    for (std::size_t k = 0; k < ref.curve.size(); ++k) EXPECT_NEAR(r.curve[k], ref.curve[k], 1e-12);
    EXPECT_NEAR(r.map, ref.map, 1e-12);
  }
}

TEST(Match, CurveInvariants) {
  std::mt19937_64 rng(21);
  const Matrix P = oracle::random_matrix(15, 3, rng), G = oracle::random_matrix(12, 3, rng);
  std::vector<int> pid(15), gid(12);
  for (int i = 0; i < 15; ++i) pid[static_cast<std::size_t>(i)] = i % 4;
  for (int i = 0; i < 12; ++i) gid[static_cast<std::size_t>(i)] = i % 4;
  const auto r = match(embedded(P, pid, "p"), embedded(G, gid, "g"));
  for (std::size_t k = 1; k < r.curve.size(); ++k) EXPECT_LE(r.curve[k - 1], r.curve[k]);
  EXPECT_EQ(r.curve.back(), 1.0);
  EXPECT_GE(r.curve.front(), 0.0);
  EXPECT_LE(r.r1, r.r5);
  EXPECT_LE(r.r5, r.r10);
}

TEST(Match, RotationInvariant) {
  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix P = oracle::random_matrix(10, 5, rng), G = oracle::random_matrix(30, 5, rng);
    const Eigen::HouseholderQR<Matrix> qr(oracle::random_matrix(5, 5, rng));
    const Matrix Q = qr.householderQ();
    std::vector<int> pid(10), gid(30);
    for (int i = 0; i < 10; ++i) pid[static_cast<std::size_t>(i)] = i % 5;
    for (int i = 0; i < 30; ++i) gid[static_cast<std::size_t>(i)] = (i * 7) % 5;
    const auto a = match(embedded(P, pid, "p"), embedded(G, gid, "g"));
    const auto b = match(embedded(P * Q, pid, "p"), embedded(G * Q, gid, "g"));
    EXPECT_EQ(a.curve, b.curve);
    EXPECT_NEAR(a.map, b.map, 1e-12);
  }
}

TEST(Match, GalleryPermutationInvariantWithoutTies) {
  std::mt19937_64 rng(23);
  const Matrix P = oracle::random_matrix(8, 4, rng), G = oracle::random_matrix(20, 4, rng);
  std::vector<int> pid(8), gid(20), perm(20);
  for (int i = 0; i < 8; ++i) pid[static_cast<std::size_t>(i)] = i % 3;
  for (int i = 0; i < 20; ++i) gid[static_cast<std::size_t>(i)] = i % 3;
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Matrix G2(20, 4);
  std::vector<int> gid2(20);
  for (int i = 0; i < 20; ++i) {
    G2.row(i) = G.row(perm[static_cast<std::size_t>(i)]);
    gid2[static_cast<std::size_t>(i)] = gid[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  }
  const auto a = match(embedded(P, pid, "p"), embedded(G, gid, "g"));
  const auto b = match(embedded(P, pid, "p"), embedded(G2, gid2, "g"));
  EXPECT_EQ(a.curve, b.curve);
  EXPECT_NEAR(a.map, b.map, 1e-12);
}

TEST(Match, ThreadCountDoesNotChangeResults) {
  std::mt19937_64 rng(24);
  const Matrix P = oracle::random_matrix(40, 6, rng), G = oracle::random_matrix(60, 6, rng);
  std::vector<int> pid(40), gid(60);
  for (int i = 0; i < 40; ++i) pid[static_cast<std::size_t>(i)] = i % 9;
  for (int i = 0; i < 60; ++i) gid[static_cast<std::size_t>(i)] = i % 9;
  setenv("HIMPC_THREADS", "1", 1);
  const auto one = report_to_json(match(embedded(P, pid, "p"), embedded(G, gid, "g")));
  setenv("HIMPC_THREADS", "4", 1);
  const auto four = report_to_json(match(embedded(P, pid, "p"), embedded(G, gid, "g")));
  unsetenv("HIMPC_THREADS");
  EXPECT_EQ(one.dump(), four.dump());
}

TEST(Match, Errors) {
  const Matrix x = Matrix::Zero(2, 3);
  EXPECT_THROW(match({}, embedded(x, {0, 1}, "g")), ValidationError);
  EXPECT_THROW(match(embedded(x, {0, 1}, "p"), {}), ValidationError);
  EXPECT_THROW(match(embedded(x, {0, 1}, "p"), embedded(Matrix::Zero(2, 4), {0, 1}, "g")), ValidationError);
}

TEST(Report, CsvAndJson) {
  Matrix probe(1, 1), gallery(3, 1);
  probe << 0.0;
  gallery << 1.0, 2.0, 3.0;
  const auto r = match(embedded(probe, {7}, "p"), embedded(gallery, {1, 7, 2}, "g"));
  EXPECT_EQ(cmc_csv(r), "rank,rate\n1,0\n2,1\n3,1\n");
  const auto j = report_to_json(r);
  EXPECT_EQ(j["probes"][0]["first_correct_rank"], 2);
  EXPECT_EQ(j["map"], 0.5);
}

TEST(Embed, RequiresIdentities) {
  auto seqs = generate_synthetic({});
  seqs[1].identity.reset();
  EXPECT_THROW(embed_sequences(params_for(20, 4, 1, 1), builtin_partitions(20), seqs), ValidationError);
}
