"""Differential conformance fuzzer for MQTT 3.1.1 brokers.

mqttprobe executes scripted, deliberately protocol-violating packet
sequences against a broker endpoint, captures a full wire trace, and
classifies the broker's behavior against an anomaly oracle.  A minimal
standard-conformant reference broker is included so the whole suite can
run self-contained on loopback.
"""

__version__ = "0.1.0"
