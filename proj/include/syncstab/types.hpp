#pragma once

#include <Eigen/Dense>

namespace syncstab {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

}  // namespace syncstab
