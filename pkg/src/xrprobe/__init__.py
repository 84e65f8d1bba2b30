"""xrprobe: in-band timestamp beacons and a deterministic pipeline simulator
for measuring motion-to-photon and mouth-to-ear latency in multiuser
edge-rendered XR sessions."""

__version__ = "0.1.0"
