"""
Models Package

Data types of the simulator.

Components:
- geometry.py: Poses, oriented boxes, frame transforms and IoU
- pointcloud.py: Point clouds and their binary file format
- tensors.py: Pseudo-images and the tensor file format
- scene.py: Scene frames, detections, the scene text format and the dataset store
"""
