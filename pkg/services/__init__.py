"""
Services Package

Simulation, learning and evaluation services.

Components:
- pillars.py: Pillar grid, S-PointNet and the pseudo-image encoder
- attention_comm.py: Query/key encoding, matching scores, fusion and surrogate training
- rpn.py: Region proposal network graph, anchors and the detection loss stack
- netsim.py: Wire codec, bandwidth ledger, link latency and communication policies
- scenegen.py: Scene generation, Lidar sweep and the oracle detector
- evaluation.py: Matching, AP, mAP, AIB and report tables
- experiment.py: Experiment steps behind the command line
- base.py: Service lifecycle base class
"""
