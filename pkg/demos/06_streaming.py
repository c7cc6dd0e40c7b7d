from gelhand import stream
from gelhand.core import TactileFrame

MS = 1_000_000

# Three cameras at 90 Hz; camera 2 runs a couple of milliseconds late
def camera(sid, lag_ns, n=45):
    return [stream.from_tactile(TactileFrame(sid, k * 11 * MS + lag_ns, 4, 3, bytes(36))) for k in range(n)]

blob = stream.encode_frame(camera(0, 0)[0])
print("one frame on the wire:", len(blob), "bytes; header", blob[:8].hex())

sources = [stream.source_serve(camera(s, 2 * MS * (s == 2)), rate_hz=90,
                               drop_after=30 if s == 1 else None) for s in range(3)]
print("serving on ports", [s.port for s in sources])

# Camera 1 dies after 30 frames; the others keep going
agg = stream.aggregate([s.address for s in sources], window_ms=5,
                       on_disconnect=lambda d: print("warning:", d))
bundles = list(agg)
for s in sources:
    s.close()

sizes = [len(b) for b in bundles]
print("bundles:", len(bundles), "| full:", sizes.count(3), "| partial:", sizes.count(2))
print("frames received per camera:", agg.received)
