import setuptools
import os

# Get the absolute path of requirements.txt
req_path = os.path.join(os.path.dirname(__file__), "requirements.txt")

# Read requirements.txt safely
with open(req_path, "r", encoding="utf-8") as f:
    requirements = f.read().splitlines()

# Read README.md
with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

setuptools.setup(
    name="panopticroad",
    version="0.1.0",
    description="Multi-task road-scene perception: vehicle detection plus drivable-area and lane-line segmentation",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=setuptools.find_packages(include=["PanopticRoad", "PanopticRoad_cli"]),
    python_requires='>=3.9',
    license='MIT',
    install_requires=requirements,
    extras_require={"test": ["pytest>=7.0"]},
    keywords="multi-task learning, object detection, semantic segmentation, drivable area, lane detection, anchor-free, distribution focal loss, pytorch",
    include_package_data=True,
    entry_points={
        'console_scripts': [
            'panroad=PanopticRoad_cli.panroad:main',
        ],
    },
)
