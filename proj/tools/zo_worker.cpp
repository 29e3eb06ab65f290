// SPDX-License-Identifier: Apache-2.0
//
// Reference black-box worker for SubprocessStage.
//
//   zo_worker affine        y = [[1,2],[3,4]] x
//   zo_worker quadratic     y = (x1^2, x1 x2)
//   zo_worker param_affine  y = W x with W (2x2, row-major) passed as parameters
//   zo_worker picky         y = x, but complains on stderr when x1 < 0
#include <cmath>
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <json.hpp>

namespace {

using Values = std::vector<double>;

struct Request {
  Values x;
  Values params;
};

Request parse(const std::string& line) {
  Request r;
  const auto close = line.find(']');
  r.x = nlohmann::json::parse(line.substr(0, close + 1)).get<Values>();
  const auto rest = line.find('[', close);
  if (rest != std::string::npos) r.params = nlohmann::json::parse(line.substr(rest)).get<Values>();
  return r;
}

}  // namespace

int main(int argc, char** argv) {
  const std::string mode = argc > 1 ? argv[1] : "affine";
  int params = 0;
  if (mode == "param_affine") {
    params = 4;
  } else if (mode != "affine" && mode != "quadratic" && mode != "picky") {
    std::cerr << "unknown mode " << mode << std::endl;
    return 2;
  }
  std::cout << "{\"in\": 2, \"out\": 2, \"params\": " << params << "}" << std::endl;

  std::string line;
  while (std::getline(std::cin, line)) {
    Request r;
    try {
      r = parse(line);
    } catch (const std::exception& e) {
      std::cerr << "bad request: " << e.what() << std::endl;
      continue;
    }
    if (r.x.size() != 2 || r.params.size() != static_cast<std::size_t>(params)) {
      std::cerr << "bad request: wrong widths" << std::endl;
      continue;
    }
    Values y(2);
    if (mode == "affine") {
      y = {r.x[0] + 2 * r.x[1], 3 * r.x[0] + 4 * r.x[1]};
    } else if (mode == "quadratic") {
      y = {r.x[0] * r.x[0], r.x[0] * r.x[1]};
    } else if (mode == "param_affine") {
      const auto& w = r.params;
      y = {w[0] * r.x[0] + w[1] * r.x[1], w[2] * r.x[0] + w[3] * r.x[1]};
    } else {
      if (r.x[0] < 0) {
        std::cerr << "negative input rejected" << std::endl;
        continue;
      }
      y = r.x;
    }
    std::cout << nlohmann::json(y).dump() << std::endl;
  }
  return 0;
}
