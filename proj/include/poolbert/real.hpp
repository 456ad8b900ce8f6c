#pragma once

// Element type of every tensor. Production builds use float32; the gradient
// verification targets compile the same sources with POOLBERT_REAL=double so
// central differences are not swamped by float rounding.
#ifndef POOLBERT_REAL
#define POOLBERT_REAL float
#endif

namespace poolbert {
using real = POOLBERT_REAL;
}  // namespace poolbert
