#pragma once

// Placeholder while the command surface is assembled; replaced by the full
// dispatcher below in this build.

namespace dcnseg {
int dispatch(int argc, char** argv);
inline int dispatch_stub() { return 0; }
}  // namespace dcnseg
