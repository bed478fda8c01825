#pragma once

namespace dact {

#ifndef DACT_BUILD_ID
#define DACT_BUILD_ID "unknown"
#endif

inline const char* build_id() { return DACT_BUILD_ID; }

}  // namespace dact
