#ifndef NEXTGUARD_NEXTGUARD_HPP
#define NEXTGUARD_NEXTGUARD_HPP

#include <nextguard/activations.hpp>
#include <nextguard/calibration.hpp>
#include <nextguard/error.hpp>
#include <nextguard/eval.hpp>
#include <nextguard/forest.hpp>
#include <nextguard/monitor.hpp>
#include <nextguard/oracle.hpp>
#include <nextguard/protocol.hpp>
#include <nextguard/sae.hpp>
#include <nextguard/service.hpp>
#include <nextguard/starguard.hpp>

#endif
