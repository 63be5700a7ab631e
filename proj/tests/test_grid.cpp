#include "ckm/grid.hpp"

#include <gtest/gtest.h>

#include <cstring>

#include "test_util.hpp"

using namespace ckm;

namespace {

GridMap building_square(int h, int r0, int c0, int side) {
    std::vector<double> v(static_cast<size_t>(h) * h, 0.0);
    for (int r = r0; r < r0 + side; ++r)
        for (int c = c0; c < c0 + side; ++c) v[static_cast<size_t>(r) * h + c] = 1.0;
    return GridMap(h, Role::building, std::move(v));
}

}  // namespace

TEST(GridMap, RoleInvariants) {
    EXPECT_NO_THROW(GridMap(2, Role::building, {0, 1, 1, 0}));
    EXPECT_THROW(GridMap(2, Role::building, {0, 0.5, 0, 0}), std::invalid_argument);
    EXPECT_THROW(GridMap(2, Role::vehicle, {0, 2, 0, 0}), std::invalid_argument);

    EXPECT_NO_THROW(GridMap(2, Role::tx, {0, 0, 1, 0}));
    EXPECT_THROW(GridMap(2, Role::tx, {0, 0, 0, 0}), std::invalid_argument);
    EXPECT_THROW(GridMap(2, Role::tx, {1, 0, 1, 0}), std::invalid_argument);

    EXPECT_NO_THROW(GridMap(2, Role::gain, {0, 0.25, 0.5, 1}));
    EXPECT_THROW(GridMap(2, Role::gain, {0, 0, 0, 1.5}), std::invalid_argument);
    EXPECT_THROW(GridMap(2, Role::gain, {0, 0, 0, -0.1}), std::invalid_argument);

    EXPECT_NO_THROW(GridMap(2, Role::region, {0, 1, 2, 3}));
    EXPECT_THROW(GridMap(2, Role::region, {0, 1, 2, 4}), std::invalid_argument);
    EXPECT_THROW(GridMap(2, Role::region, {0, 1, 2.5, 3}), std::invalid_argument);

    double nan = std::nan("");
    EXPECT_THROW(GridMap(2, Role::sparse, {0, nan, 0, 0}), std::invalid_argument);
    EXPECT_THROW(GridMap(0, Role::gain, {}), std::invalid_argument);
    EXPECT_THROW(GridMap(3, Role::gain, {0, 0}), std::invalid_argument);
}

TEST(GridMap, ZerosRefusesTx) {
    EXPECT_NO_THROW(GridMap::zeros(4, Role::building));
    EXPECT_THROW(GridMap::zeros(4, Role::tx), std::invalid_argument);
}

TEST(GridMap, Indexing) {
    GridMap m(2, Role::sparse, {1, 2, 3, 4});
    EXPECT_EQ(m(0, 0), 1);
    EXPECT_EQ(m(0, 1), 2);
    EXPECT_EQ(m(1, 0), 3);
    EXPECT_TRUE(m.in_bounds(1, 1));
    EXPECT_FALSE(m.in_bounds(2, 0));
    EXPECT_FALSE(m.in_bounds(0, -1));
}

TEST(Normalize, Basics) {
    std::vector<double> pl = {30, 95, 160, 10};
    GridMap g = normalize_gain(pl, 2, 30.0, 160.0);
    EXPECT_DOUBLE_EQ(g(0, 0), 0.0);
    EXPECT_DOUBLE_EQ(g(0, 1), 0.5);
    EXPECT_DOUBLE_EQ(g(1, 0), 1.0);
    EXPECT_DOUBLE_EQ(g(1, 1), 0.0);  // below range clamps to 0
    ASSERT_TRUE(g.calibration().has_value());
    EXPECT_DOUBLE_EQ(g.calibration()->pl_min_db, 30.0);
    EXPECT_DOUBLE_EQ(g.calibration()->pl_max_db, 160.0);

    std::vector<double> back = denormalize_gain(g);
    EXPECT_DOUBLE_EQ(back[0], 30.0);
    EXPECT_DOUBLE_EQ(back[1], 95.0);
    EXPECT_DOUBLE_EQ(back[2], 160.0);

    EXPECT_THROW(normalize_gain(pl, 2, 100.0, 100.0), std::invalid_argument);
    EXPECT_THROW(normalize_gain(pl, 2, 160.0, 30.0), std::invalid_argument);
    GridMap plain(2, Role::gain, {0, 0, 0, 0});
    EXPECT_THROW(denormalize_gain(plain), std::invalid_argument);
}

TEST(Normalize, AboveRangeClampsToOne) {
    std::vector<double> pl = {200, 30, 30, 30};
    GridMap g = normalize_gain(pl, 2, 30.0, 160.0);
    EXPECT_DOUBLE_EQ(g(0, 0), 1.0);
}

TEST(TxMap, Placement) {
    GridMap t = make_tx_map(3, 1, 2);
    EXPECT_EQ(t.role(), Role::tx);
    EXPECT_DOUBLE_EQ(t(1, 2), 1.0);
    double sum = 0;
    for (double v : t.values()) sum += v;
    EXPECT_DOUBLE_EQ(sum, 1.0);
    EXPECT_THROW(make_tx_map(3, 3, 0), std::invalid_argument);
    EXPECT_THROW(make_tx_map(3, 0, -1), std::invalid_argument);
}

TEST(CondStack, Validation) {
    GridMap b = building_square(4, 0, 0, 2);
    GridMap t = make_tx_map(4, 3, 3);
    CondStack cs(b, t);
    auto [r, c] = cs.tx_cell();
    EXPECT_EQ(r, 3);
    EXPECT_EQ(c, 3);
    EXPECT_FALSE(cs.vehicle.has_value());

    GridMap t5 = make_tx_map(5, 0, 0);
    EXPECT_THROW(CondStack(b, t5), std::invalid_argument);
    EXPECT_THROW(CondStack(t, t), std::invalid_argument);  // wrong role in building slot
}

TEST(SaveLoad, RoundTripBitExact) {
    TempDir td("ckm_grid");
    std::vector<double> pl(16);
    for (int i = 0; i < 16; ++i) pl[i] = 30.0 + 130.0 * i / 15.0;
    GridMap g = normalize_gain(pl, 4, 30.0, 160.0);
    save_map(g, td.file("g.ckm"));
    GridMap g2 = load_map(td.file("g.ckm"));
    EXPECT_EQ(g2.h(), 4);
    EXPECT_EQ(g2.role(), Role::gain);
    ASSERT_TRUE(g2.calibration().has_value());
    EXPECT_EQ(std::memcmp(g.values().data(), g2.values().data(), 16 * sizeof(double)), 0);
    EXPECT_DOUBLE_EQ(g2.calibration()->pl_min_db, 30.0);
    EXPECT_DOUBLE_EQ(g2.calibration()->pl_max_db, 160.0);

    // writer is deterministic
    save_map(g, td.file("g2.ckm"));
    EXPECT_EQ(read_file_bytes(td.file("g.ckm")), read_file_bytes(td.file("g2.ckm")));

    // roles without calibration
    GridMap b = building_square(4, 1, 1, 2);
    save_map(b, td.file("b.ckm"));
    GridMap b2 = load_map(td.file("b.ckm"));
    EXPECT_EQ(b2.role(), Role::building);
    EXPECT_FALSE(b2.calibration().has_value());
    EXPECT_EQ(b.values(), b2.values());
}

TEST(SaveLoad, MalformedFiles) {
    TempDir td("ckm_badfile");
    GridMap b = building_square(4, 0, 0, 2);
    save_map(b, td.file("ok.ckm"));
    std::string good = read_file_bytes(td.file("ok.ckm"));

    write_file_bytes(td.file("magic.ckm"), "XXXX" + good.substr(4));
    EXPECT_THROW(load_map(td.file("magic.ckm")), std::runtime_error);

    write_file_bytes(td.file("trunc.ckm"), good.substr(0, good.size() - 7));
    EXPECT_THROW(load_map(td.file("trunc.ckm")), std::runtime_error);

    std::string bad_role = good;
    bad_role[8] = char(42);  // role byte
    write_file_bytes(td.file("role.ckm"), bad_role);
    EXPECT_THROW(load_map(td.file("role.ckm")), std::runtime_error);

    std::string bad_flags = good;
    bad_flags[9] = char(0x80);  // flags byte
    write_file_bytes(td.file("flags.ckm"), bad_flags);
    EXPECT_THROW(load_map(td.file("flags.ckm")), std::runtime_error);

    EXPECT_THROW(load_map(td.file("missing.ckm")), std::runtime_error);
}

TEST(Pgm, GoldenBytes) {
    TempDir td("ckm_pgm");
    GridMap g(2, Role::gain, {0.0, 0.5, 1.0, 0.25});
    save_pgm(g, td.file("g.pgm"));
    std::string bytes = read_file_bytes(td.file("g.pgm"));
    std::string expect = "P5\n2 2\n255\n";
    expect.push_back(char(0));
    expect.push_back(char(128));  // 0.5*255 = 127.5 rounds half up
    expect.push_back(char(255));
    expect.push_back(char(64));  // 63.75 rounds to nearest
    EXPECT_EQ(bytes, expect);
}

TEST(Sample, Validation) {
    GridMap b = building_square(4, 0, 0, 2);
    GridMap t = make_tx_map(4, 3, 3);
    std::vector<double> pl(16, 100.0);
    GridMap g = normalize_gain(pl, 4, 30.0, 160.0);
    GridMap reg = GridMap::zeros(4, Role::region);
    EXPECT_NO_THROW(Sample(CondStack(b, t), g, reg));
    EXPECT_THROW(Sample(CondStack(b, t), b, std::nullopt), std::invalid_argument);
    EXPECT_THROW(Sample(CondStack(b, t), g, b), std::invalid_argument);
}
