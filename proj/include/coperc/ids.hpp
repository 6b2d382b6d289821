#pragma once

namespace coperc {

using CavId = int;

}  // namespace coperc
