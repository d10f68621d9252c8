from setuptools import setup, find_packages

# For guidance on setuptools best practices visit
# https://packaging.python.org/guides/distributing-packages-using-setuptools/
project_name = "osfp"
version = "0.1.0"
package_description = "Neural network OS fingerprinting from Nmap responses and DCE-RPC endpoint listings"
url = "https://github.com/ai2es/" + project_name
# Classifiers listed at https://pypi.org/classifiers/
classifiers = ["Programming Language :: Python :: 3",
               "Topic :: Security",
               "Topic :: System :: Networking :: Monitoring"]

setup(name=project_name,
      version=version,
      description=package_description,
      url=url,
      author="AI2ES",
      license="CC0 1.0",
      classifiers=classifiers,
      python_requires=">=3.8",
      install_requires=["numpy", "scipy", "pandas", "scikit-learn", "pyyaml", "joblib", "numba", "tqdm"],
      entry_points={"console_scripts": ["osfp = osfp.cli:main"]},
      packages=find_packages(include=["osfp"]))
