#include <catch2/catch_amalgamated.hpp>

#include "imbseg/imbseg.hpp"

TEST_CASE("umbrella header compiles and basic objects construct", "[smoke]") {
  imbseg::Volume v({4, 4, 4}, {1.0, 1.0, 1.0}, 0.0);
  REQUIRE(v.data.size() == 64);
  imbseg::NetConfig net;
  net.base_channels = 2;
  imbseg::ModelParams p = imbseg::init_params(net, 1);
  REQUIRE(p.values.size() == imbseg::param_count(p.shapes));
}
