#pragma once

#include <stdexcept>
#include <string>

namespace t3po {

// Error families map onto the CLI exit-code contract:
//   0 ok, 2 data/config, 3 training, 4 consistency, 5 unsupported.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainingError : std::runtime_error {
    int epoch = 0;
    int batch = 0;
    double loss_class = 0.0;
    double loss_xform = 0.0;
    TrainingError(const std::string& what, int epoch_, int batch_, double lc, double lx)
        : std::runtime_error(what), epoch(epoch_), batch(batch_), loss_class(lc), loss_xform(lx) {}
};

struct ConsistencyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct UnsupportedError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace t3po
