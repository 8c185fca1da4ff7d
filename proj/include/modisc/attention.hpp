#pragma once

#include "modisc/tensor.hpp"

namespace modisc {

// Per-frame attention over N = h*w positions: one map per foreground
// slot plus the background map. Rows of [slots | background] sum to 1.
struct AttentionMaps {
    int h = 0, w = 0;
    Tensor slots;       // [N, K]
    Tensor background;  // [N]

    int num_positions() const { return h * w; }
    int num_slots() const { return slots.ndim() == 2 ? slots.dim(1) : 0; }

    Tensor foreground() const {
        Tensor fg = background;
        for (auto& v : fg.vec()) v = 1.0 - v;
        return fg;
    }
};

}  // namespace modisc
