// Renders one synthetic scene as ASCII: the building mask, the simulated
// channel gain, and the derived region classes.  No training involved; good
// for eyeballing what the data generator produces.
//
//   ./demo_propagation [seed]

#include <cstdlib>
#include <iostream>

#include "ckm/propagation.hpp"

using namespace ckm;

namespace {

void render(const GridMap& m, const char* shades, int n_shades) {
    int h = m.h();
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < h; ++c) {
            double v = m(r, c);
            int k = std::min(n_shades - 1, (int)(v * n_shades));
            std::cout << shades[k] << shades[k];
        }
        std::cout << '\n';
    }
}

}  // namespace

int main(int argc, char** argv) {
    DatasetConfig cfg;
    cfg.seed = argc > 1 ? std::strtoull(argv[1], nullptr, 10) : 7;
    cfg.h = 48;
    cfg.vehicles_min = 1;  // a couple of vehicles to make the scene dynamic
    cfg.vehicles_max = 2;

    Sample s = generate_sample(cfg, /*map_index=*/0, /*tx_index=*/0);

    std::cout << "tx at (" << s.cond.tx_cell().first << ", " << s.cond.tx_cell().second << ")\n\n";
    std::cout << "buildings + vehicles ('#' building, 'o' vehicle):\n";
    int h = s.cond.h();
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < h; ++c) {
            char ch = s.cond.building(r, c) > 0.5 ? '#'
                      : (s.cond.vehicle && (*s.cond.vehicle)(r, c) > 0.5 ? 'o' : '.');
            std::cout << ch << ch;
        }
        std::cout << '\n';
    }
    std::cout << "\nnormalized channel gain (dark = weak):\n";
    render(s.gain, " .:-=+*%@", 9);
    std::cout << "\nregion classes (0..3):\n";
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < h; ++c) {
            int k = (int)((*s.region)(r, c) + 0.5);
            std::cout << k << k;
        }
        std::cout << '\n';
    }
    return 0;
}
