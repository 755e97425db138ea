#pragma once

#include "netdam/addressing.hpp"
#include "netdam/bench.hpp"
#include "netdam/collective.hpp"
#include "netdam/device.hpp"
#include "netdam/isa.hpp"
#include "netdam/reliability.hpp"
#include "netdam/transport.hpp"
#include "netdam/types.hpp"
#include "netdam/wire.hpp"
