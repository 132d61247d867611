#pragma once

namespace dmtrl {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};

}  // namespace dmtrl
